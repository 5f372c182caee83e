import json

import pytest
from hypothesis import given, strategies as st

from fjsplb.instance import (ConfigError, GeneratorConfig, InstanceFormatError, InstanceValidationError,
                             generate_instance, generate_set, load_instance, load_instance_dir, parse_size,
                             read_instance, save_instance, validate_instance, write_instance)

from conftest import make_instance


def test_default_row_shape():
    inst = generate_instance(GeneratorConfig(seed=1))
    assert inst.n_jobs == 10 and inst.machine_count == 5
    assert inst.category_count == 10 and inst.pallet_count == 6
    assert (inst.place_time, inst.switch_time) == (2, 5)
    assert inst.part_sorting_machines == frozenset({4})
    for job in inst.jobs:
        assert 4 <= len(job.operations) <= 6
        assert sum(op.is_part_sorting for op in job.operations) == 1
        assert 3 <= len(job.parts) <= 5
        for op in job.operations:
            assert 1 <= len(op.compatible)
            assert all(1 <= p <= 20 for _, p in op.compatible)
            if op.is_part_sorting:
                assert {m for m, _ in op.compatible} <= inst.part_sorting_machines
            else:
                assert not {m for m, _ in op.compatible} & inst.part_sorting_machines
    assert validate_instance(inst) == []


def test_degenerate_ranges_give_full_flexibility():
    cfg = GeneratorConfig(n_jobs=4, n_machines=3, ops_per_job_range=(1, 1), machines_per_op_range=(3, 3),
                          n_ps=0, seed=5)
    inst = generate_instance(cfg)
    for op in inst.operations():
        assert [m for m, _ in op.compatible] == [0, 1, 2]


def test_same_seed_same_bytes():
    cfg = GeneratorConfig(seed=42)
    assert save_instance(generate_instance(cfg)) == save_instance(generate_instance(cfg))
    assert save_instance(generate_instance(cfg)) != save_instance(generate_instance(GeneratorConfig(seed=43)))


def test_ops_per_job_distribution():
    seen = set()
    for inst in generate_set(GeneratorConfig(), 1000, 0):
        seen.update(len(j.operations) for j in inst.jobs)
    assert seen == {4, 5, 6}


def test_too_many_categories_for_pallets():
    ops = [({0: 3}, False), ({1: 2}, True)]
    inst = make_instance([(ops, [(c, 1) for c in range(7)])], 2, ps_machines=[1], C=10, P=6)
    bad = validate_instance(inst)
    assert len(bad) == 1 and "exceeds pallet count" in bad[0]


def test_empty_compatible_set():
    inst = make_instance([([({}, False), ({0: 1}, False)], [])], 1)
    bad = validate_instance(inst)
    assert len(bad) == 1 and "no compatible machine" in bad[0]


def test_ps_op_on_regular_machine_flagged():
    inst = make_instance([([({0: 1, 1: 2}, True)], [(0, 1)])], 2, ps_machines=[1])
    assert any("non part-sorting machine" in v for v in validate_instance(inst))


def test_single_machine_cannot_host_part_sorting():
    with pytest.raises(ConfigError, match="no regular machines"):
        generate_instance(GeneratorConfig.for_size(3, 1))


@pytest.mark.parametrize("bad", [
    GeneratorConfig(ops_per_job_range=(5, 4)),
    GeneratorConfig(categories_per_job_range=(3, 7)),
    GeneratorConfig(proc_time_range=(0, 3)),
    GeneratorConfig(n_jobs=0),
])
def test_bad_config(bad):
    with pytest.raises(ConfigError):
        generate_instance(bad)


def test_round_trip_10x5():
    inst = generate_instance(GeneratorConfig(seed=9))
    assert load_instance(save_instance(inst)) == inst


def test_truncated_document():
    data = save_instance(generate_instance(GeneratorConfig(seed=9)))
    with pytest.raises(InstanceFormatError, match="line"):
        load_instance(data[: len(data) // 2])


def test_wrong_field_type_names_location():
    d = json.loads(save_instance(generate_instance(GeneratorConfig(seed=2))))
    d["jobs"][3]["operations"][1]["compatible"][0][1] = "slow"
    with pytest.raises(InstanceFormatError, match=r"\$\.jobs\[3\]\.operations\[1\]\.compatible\[0\]\[1\]"):
        load_instance(json.dumps(d))


def test_invalid_content_is_a_validation_error():
    d = json.loads(save_instance(generate_instance(GeneratorConfig(seed=2))))
    d["pallet_count"] = 2
    with pytest.raises(InstanceValidationError) as err:
        load_instance(json.dumps(d))
    assert all("exceeds pallet count" in v for v in err.value.violations)


def test_production_line_sized_document_loads():
    # 20 jobs, 10 machines, long placement and pallet change times, 24 pallets
    jobs = []
    for j in range(20):
        ops = [{"part_sorting": False, "compatible": [[(j + i) % 8, 30 + i]]} for i in range(5)]
        ops.insert(2, {"part_sorting": True, "compatible": [[8, 1], [9, 1]]})
        jobs.append({"parts": [[(3 * j + k) % 30, 2] for k in range(4)], "operations": ops})
    doc = {"format": "fjsp-lbmk-instance", "version": 1, "name": "line", "machine_count": 10,
           "part_sorting_machines": [8, 9], "category_count": 30, "pallet_count": 24,
           "place_time": 14, "switch_time": 180, "jobs": jobs}
    inst = load_instance(json.dumps(doc))
    assert inst.n_jobs == 20 and inst.pallet_count == 24 and inst.switch_time == 180


def test_files_and_directories(tmp_path):
    insts = generate_set(GeneratorConfig(n_jobs=3, n_machines=5), 3, 100)
    for k, inst in enumerate(insts):
        write_instance(inst, tmp_path / f"{k}.json")
    assert read_instance(tmp_path / "1.json") == insts[1]
    assert load_instance_dir(tmp_path) == insts


def test_parse_size():
    assert parse_size("10x5") == (10, 5)
    assert parse_size("20×10") == (20, 10)
    with pytest.raises(ConfigError):
        parse_size("ten by five")


def test_part_shares_split_contiguously():
    ops = [({0: 1}, False), ({1: 1}, True), ({1: 1}, True)]
    inst = make_instance([(ops, [(0, 1), (1, 2), (2, 3)])], 2, ps_machines=[1], C=3, P=3)
    assert inst.part_shares(0) == [((0, 1), (1, 2)), ((2, 3),)]


@given(st.integers(0, 2**63 - 1), st.integers(1, 12), st.integers(2, 8))
def test_generator_always_valid(seed, n, m):
    cfg = GeneratorConfig.for_size(n, m, seed=seed)
    inst = generate_instance(cfg)
    assert validate_instance(inst) == []
    assert load_instance(save_instance(inst)) == inst
