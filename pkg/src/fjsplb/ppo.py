"""PPO training of the graph policy.

One training iteration rolls out one episode on each of the ``batch_size``
current training instances.  Every ``update_interval`` iterations the
collected steps feed a PPO update (``k_epochs`` passes over shuffled
minibatches).  The policy is validated greedily every
``validate_interval`` iterations and the training instances are redrawn
every ``resample_interval`` iterations.

Environments of one batch advance in lockstep so that a single batched
forward pass serves all of them; each environment samples with its own
random stream spawned from the run seed.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import NumericError, Var
from .env import EnvConfig, EpisodeTrace, SchedulingEnv, new_trace, record_step
from .graph import GraphBuilder, HeteroGraph
from .instance import GeneratorConfig, Instance, generate_instance, generate_set
from .net import Adam, NetConfig, PolicyParams, backward, collate, forward

log = logging.getLogger(__name__)

VALIDATION_SEED = 10_000_000
TEST_SEED = 20_000_000


@dataclass(frozen=True)
class PPOConfig:
    lr: float = 2e-4
    gamma: float = 1.0
    k_epochs: int = 3
    a_coeff: float = 1.0
    vf_coeff: float = 0.5
    entropy_coeff: float = 0.05
    kl_coeff: float = 0.05
    batch_size: int = 20
    minibatch: int = 512
    # an update phase runs after this many iterations, i.e. every
    # ``update_interval`` episodes per worker
    update_interval: int = 5
    validate_interval: int = 10
    resample_interval: int = 20
    max_iterations: int = 10000
    clip_eps: float = 0.2
    gae_smoothing: float = 0.98
    reward_lam: float = 1.0
    reward_scale: float = 0.01
    max_grad_norm: float | None = None
    n_jobs: int = 10
    n_machines: int = 5
    n_validation: int = 100
    eviction: str = "demand"
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        for name in ("lr", "k_epochs", "batch_size", "minibatch", "update_interval",
                     "validate_interval", "resample_interval", "clip_eps", "reward_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_smoothing <= 1:
            raise ValueError("gae_smoothing must lie in [0, 1]")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")

    def env_config(self) -> EnvConfig:
        return EnvConfig(lam=self.reward_lam, eviction=self.eviction)

    def generator(self, seed: int = 0) -> GeneratorConfig:
        return GeneratorConfig.for_size(self.n_jobs, self.n_machines, seed=seed,
                                        category_count=self.net.category_count)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        d = dict(d)
        if "net" in d:
            d["net"] = NetConfig.from_dict(d["net"])
        return cls(**d)


# ---------------------------------------------------------------- rollouts

@dataclass
class StepRecord:
    graph: HeteroGraph
    action: int  # index into graph.pairs
    log_prob: float
    value: float
    reward: float
    done: bool
    advantage: float = 0.0
    ret: float = 0.0
    anchor_log_probs: np.ndarray | None = None


@dataclass
class Trajectory:
    steps: list[StepRecord]
    trace: EpisodeTrace

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps])

    @property
    def values(self) -> np.ndarray:
        return np.array([s.value for s in self.steps])


def _pick(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))


def run_lockstep(params: PolicyParams, instances: list[Instance], rngs=None, greedy: bool = False,
                 env_config: EnvConfig | None = None, keep_steps: bool = True,
                 reward_scale: float = 1.0) -> list[Trajectory]:
    """Roll out one episode per instance with a shared batched forward pass.

    ``greedy`` takes the most probable pair (first on ties); otherwise
    ``rngs[i]`` samples the action of episode ``i``.
    """
    cfg = params.config
    envs = [SchedulingEnv(inst, env_config, validate=False) for inst in instances]
    builders = [GraphBuilder(e, cfg.mode, cfg.features, cfg.alpha) for e in envs]
    states = [e.reset() for e in envs]
    trajs = [Trajectory([], new_trace(e, s)) for e, s in zip(envs, states)]
    active = [i for i in range(len(envs)) if not envs[i].done(states[i])]
    while active:
        graphs, acts = [], []
        for i in active:
            a = envs[i].eligible_actions(states[i])
            acts.append(a)
            graphs.append(builders[i].build(states[i], a))
        out = forward(collate(graphs), params)
        lp = out.log_probs.value.reshape(-1)
        vals = out.value.value.reshape(-1)
        pos = 0
        still = []
        for k, i in enumerate(active):
            n = len(acts[k])
            seg = lp[pos:pos + n]
            pos += n
            if greedy:
                idx = int(np.argmax(seg))
            else:
                idx = _pick(np.exp(seg), rngs[i])
            res = envs[i].step(states[i], acts[k][idx])
            record_step(envs[i], trajs[i].trace, acts[k][idx], res)
            if keep_steps:
                trajs[i].steps.append(StepRecord(graphs[k], idx, float(seg[idx]), float(vals[k]),
                                                 res.reward * reward_scale, res.done))
            states[i] = res.state
            if not res.done:
                still.append(i)
        active = still
    return trajs


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def collect_rollouts(params: PolicyParams, instances: list[Instance], seed: int,
                     env_config: EnvConfig | None = None, reward_scale: float = 1.0) -> list[Trajectory]:
    """One sampled episode per instance; per-instance streams derive from ``seed``."""
    return run_lockstep(params, instances, spawn_rngs(seed, len(instances)), False, env_config,
                        reward_scale=reward_scale)


def compute_advantages(rewards, values, gamma: float = 1.0, smoothing: float = 0.98):
    """Generalized advantage estimates and returns of one complete episode."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    T = len(rewards)
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        next_v = values[t + 1] if t + 1 < T else 0.0
        delta = rewards[t] + gamma * next_v - values[t]
        acc = delta + gamma * smoothing * acc
        adv[t] = acc
    return adv, adv + values


def clipped_surrogate(ratio, advantage, eps: float):
    """Per-sample PPO objective ``min(r A, clip(r, 1-eps, 1+eps) A)`` (numpy version)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - eps, 1 + eps) * advantage)


# ---------------------------------------------------------------- update

@dataclass
class LossTerms:
    total: Var
    policy: float
    value: float
    entropy: float
    kl: float
    clip_frac: float
    ratio_max: float


def ppo_loss(params_or_leaves, steps: list[StepRecord], config: PPOConfig, adv: np.ndarray,
             use_anchor: bool, cfg: NetConfig | None = None) -> LossTerms:
    batch = collate([s.graph for s in steps])
    out = forward(batch, params_or_leaves, cfg)
    n = len(steps)
    chosen = np.array([s.action for s in steps]) + batch.pair_offsets
    pick = sp.csr_matrix((np.ones(n), (np.arange(n), chosen)), shape=(n, batch.n_pairs))
    new_lp = ag.spmm(pick, out.log_probs)
    old_lp = np.array([s.log_prob for s in steps]).reshape(-1, 1)
    A = adv.reshape(-1, 1)
    ratio = ag.exp(new_lp - old_lp)
    eps = config.clip_eps
    surr = ag.minimum(ratio * A, ag.clip(ratio, 1 - eps, 1 + eps) * A)
    policy_loss = ag.neg(ag.mean(surr))
    rets = np.array([s.ret for s in steps]).reshape(-1, 1)
    value_loss = ag.mean(ag.square(out.value - rets))
    p = ag.exp(out.log_probs)
    entropy = ag.mul(ag.neg(ag.total(p * out.log_probs)), 1.0 / n)
    total = (ag.mul(policy_loss, config.a_coeff) + ag.mul(value_loss, config.vf_coeff)
             - ag.mul(entropy, config.entropy_coeff))
    kl_val = 0.0
    if use_anchor:
        anchor = np.concatenate([s.anchor_log_probs for s in steps]).reshape(-1, 1)
        kl = ag.mul(ag.total(p * (out.log_probs - anchor)), 1.0 / n)
        total = total + ag.mul(kl, config.kl_coeff)
        kl_val = float(kl.value)
    r = ratio.value.reshape(-1)
    return LossTerms(total, float(policy_loss.value), float(value_loss.value), float(entropy.value),
                     kl_val, float(np.mean(np.abs(r - 1) > eps)), float(r.max()))


def attach_advantages(trajs: list[Trajectory], config: PPOConfig) -> None:
    for tr in trajs:
        adv, ret = compute_advantages(tr.rewards, tr.values, config.gamma, config.gae_smoothing)
        for s, a, r in zip(tr.steps, adv, ret):
            s.advantage, s.ret = float(a), float(r)


def attach_anchor(steps: list[StepRecord], anchor: PolicyParams, chunk: int = 512) -> None:
    for i in range(0, len(steps), chunk):
        part = steps[i:i + chunk]
        batch = collate([s.graph for s in part])
        lp = forward(batch, anchor).log_probs.value.reshape(-1)
        for s, off, cnt in zip(part, batch.pair_offsets, batch.pair_counts):
            s.anchor_log_probs = lp[off:off + cnt].copy()


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv - adv.mean() if len(adv) else adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(params: PolicyParams, optimizer: Adam, steps: list[StepRecord], config: PPOConfig,
               rng: np.random.Generator, anchor: PolicyParams | None = None) -> dict:
    """``k_epochs`` passes of clipped PPO over shuffled minibatches; mutates ``params``."""
    if not steps:
        raise ValueError("empty batch")
    if anchor is not None:
        attach_anchor(steps, anchor)
    adv = normalize_advantages(np.array([s.advantage for s in steps]))
    stats = {"policy": [], "value": [], "entropy": [], "kl": [], "clip_frac": [], "ratio_max": []}
    N = len(steps)
    for _ in range(config.k_epochs):
        perm = rng.permutation(N)
        for lo in range(0, N, config.minibatch):
            idx = perm[lo:lo + config.minibatch]
            leaves = params.leaves()
            terms = ppo_loss(leaves, [steps[i] for i in idx], config, adv[idx], anchor is not None, params.config)
            if not np.isfinite(terms.total.value):
                raise NumericError(f"non-finite PPO loss: {terms}")
            grads = backward(terms.total, leaves)
            optimizer.step(params, grads, config.max_grad_norm)
            for k in stats:
                stats[k].append(getattr(terms, k))
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    out["policy_loss"] = out.pop("policy")
    out["value_loss"] = out.pop("value")
    out["ratio_max"] = float(np.max(stats["ratio_max"]))
    return out


# ---------------------------------------------------------------- training

LOG_FIELDS = ["iteration", "train_makespan", "train_switches", "policy_loss", "value_loss", "entropy",
              "kl", "val_makespan", "val_switches", "best_val_makespan"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def greedy_metrics(params: PolicyParams, instances: list[Instance], env_config: EnvConfig | None = None,
                   chunk: int = 100) -> tuple[float, float]:
    ms, sw = [], []
    for i in range(0, len(instances), chunk):
        for tr in run_lockstep(params, instances[i:i + chunk], greedy=True, env_config=env_config,
                               keep_steps=False):
            ms.append(tr.trace.makespan)
            sw.append(tr.trace.total_switches)
    return float(np.mean(ms)), float(np.mean(sw))


def validation_set(config: PPOConfig) -> list[Instance]:
    return generate_set(config.generator(), config.n_validation, VALIDATION_SEED)


class Trainer:
    """Stateful PPO loop; :func:`train` is the one-call wrapper."""

    def __init__(self, config: PPOConfig, out_dir, params: PolicyParams | None = None,
                 anchor: PolicyParams | None = None, train_pool: list[Instance] | None = None,
                 val_set: list[Instance] | None = None):
        self.config = config
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.params = params.copy() if params is not None else PolicyParams(config.net)
        if self.params.config != config.net:
            raise ValueError("initial parameters were built for a different network configuration")
        self.anchor = anchor
        self.opt = Adam(self.params, config.lr)
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        self.train_pool = train_pool
        self.val_set = val_set if val_set is not None else validation_set(config)
        self.best = float("inf")
        self.rows: list[dict] = []
        self.env_config = config.env_config()
        self._instances: list[Instance] = []

    def _sample_instances(self) -> list[Instance]:
        B = self.config.batch_size
        if self.train_pool:
            idx = self.rng.choice(len(self.train_pool), size=B, replace=len(self.train_pool) < B)
            return [self.train_pool[i] for i in idx]
        seeds = self.rng.integers(0, 2**62, size=B)
        return [generate_instance(self.config.generator(int(s))) for s in seeds]

    def run(self) -> list[dict]:
        cfg = self.config
        self.params.save(self.out / "initial.ckpt")
        buffer: list[StepRecord] = []
        last_stats: dict = {}
        log_path = self.out / "train_log.csv"
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, LOG_FIELDS, lineterminator="\n")
            writer.writeheader()
            self._instances = self._sample_instances() if cfg.max_iterations else []
            for it in range(1, cfg.max_iterations + 1):
                try:
                    seed = int(self.rng.integers(0, 2**62))
                    trajs = collect_rollouts(self.params, self._instances, seed, self.env_config, cfg.reward_scale)
                    attach_advantages(trajs, cfg)
                    for tr in trajs:
                        buffer.extend(tr.steps)
                    row = {"iteration": it,
                           "train_makespan": float(np.mean([t.trace.makespan for t in trajs])),
                           "train_switches": float(np.mean([t.trace.total_switches for t in trajs]))}
                    if it % cfg.update_interval == 0:
                        last_stats = ppo_update(self.params, self.opt, buffer, cfg, self.rng, self.anchor)
                        buffer = []
                        row.update({k: last_stats[k] for k in ("policy_loss", "value_loss", "entropy", "kl")})
                    if it % cfg.validate_interval == 0:
                        vm, vs = greedy_metrics(self.params, self.val_set, self.env_config)
                        row["val_makespan"], row["val_switches"] = vm, vs
                        if vm < self.best:
                            self.best = vm
                            self.params.save(self.out / "best.ckpt")
                        row["best_val_makespan"] = self.best
                    if it % cfg.resample_interval == 0:
                        self._instances = self._sample_instances()
                except NumericError:
                    self.params.save(self.out / "last.ckpt")
                    raise
                writer.writerow({k: _fmt(row.get(k)) for k in LOG_FIELDS})
                fh.flush()
                self.rows.append(row)
                if it % 10 == 0:
                    log.info("iter %d makespan %.2f switches %.2f best_val %s", it, row["train_makespan"],
                             row["train_switches"], row.get("best_val_makespan"))
            if cfg.max_iterations:
                self.params.save(self.out / "last.ckpt")
                if not (self.out / "best.ckpt").exists():
                    self.params.save(self.out / "best.ckpt")
        with open(self.out / "config.json", "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
        return self.rows


def train(config: PPOConfig, out_dir, params: PolicyParams | None = None, anchor: PolicyParams | None = None,
          train_pool: list[Instance] | None = None, val_set: list[Instance] | None = None) -> list[dict]:
    return Trainer(config, out_dir, params, anchor, train_pool, val_set).run()


def finetune(checkpoint, config: PPOConfig, out_dir, instances: list[Instance],
             val_set: list[Instance] | None = None) -> list[dict]:
    """Continue training from ``checkpoint`` with a KL pull toward the frozen starting policy."""
    start = PolicyParams.load(checkpoint)
    config = replace(config, net=start.config)
    if val_set is None:
        val_set = instances[: config.n_validation]
    return train(config, out_dir, params=start, anchor=start.copy(), train_pool=instances, val_set=val_set)
