"""Shared fixtures that need the package (kept apart from the package-free oracles)."""
from __future__ import annotations

import numpy as np

from fjsplb import autograd as ag
from fjsplb.env import SchedulingEnv
from fjsplb.graph import GraphBuilder
from fjsplb.instance import GeneratorConfig, generate_instance
from fjsplb.net import NetConfig, PolicyParams, backward, collate, forward

from oracles import finite_difference


def mid_episode_graphs(n_jobs=3, n_machines=3, seed=0, mode="sort_only_weighted", count=2, C=4):
    """Graphs from a random rollout of a small instance, taken at a few epochs."""
    cfg = GeneratorConfig(n_jobs=n_jobs, n_machines=n_machines, ops_per_job_range=(2, 3),
                          machines_per_op_range=(1, 2), categories_per_job_range=(1, 3),
                          category_count=C, pallet_count=3, seed=seed)
    env = SchedulingEnv(generate_instance(cfg))
    b = GraphBuilder(env, mode)
    rng = np.random.default_rng(seed)
    s = env.reset()
    graphs = []
    while not env.done(s) and len(graphs) < count:
        graphs.append(b.build(s))
        acts = env.eligible_actions(s)
        s = env.step(s, acts[int(rng.integers(len(acts)))]).state
    return graphs


def gradient_check(embed_dim=4, layers=2, hidden=6, seed=0, h=1e-5):
    """Analytic vs central-difference gradients of a mixed scalar over every parameter.

    Returns ``(analytic, numeric, names)`` as flat vectors plus a per-coordinate layer name list.
    """
    graphs = mid_episode_graphs(seed=seed)
    cfg = NetConfig(category_count=4, embed_dim=embed_dim, hidden_dim=hidden, gnn_layers=layers, seed=seed)
    params = PolicyParams(cfg)
    batch = collate(graphs)
    rng = np.random.default_rng(seed + 1)
    cw = rng.normal(size=(batch.n_pairs, 1))
    vw = rng.normal(size=(batch.n_graphs, 1))

    def scalar(P):
        out = forward(batch, P, cfg)
        ent = ag.mul(ag.exp(out.log_probs), out.log_probs)
        return ag.add(ag.add(ag.total(ag.mul(out.log_probs, cw)), ag.total(ag.mul(out.value, vw))),
                      ag.mul(ag.total(ent), 0.3))

    leaves = params.leaves()
    grads = backward(scalar(leaves), leaves)
    analytic = params.flatten_grads(grads)

    def f(vec):
        p = params.copy()
        p.set_flat(vec)
        return float(scalar(p).value)

    numeric = finite_difference(f, params.flat(), h)
    names = [k for k, a in params.arrays.items() for _ in range(a.size)]
    return analytic, numeric, names
