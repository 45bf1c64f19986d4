import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmtx.errors import ConfigError
from pmtx.workload import (PRESETS, WorkloadSpec, ZipfianGenerator, generate, load_workload,
                           preset)


def test_presets_sum_to_hundred():
    for name in PRESETS:
        spec = preset(name)
        assert sum(spec.op_mix.values()) == 100


def test_ycsb_mixes():
    assert preset("ycsb-a").op_mix == {"read": 50, "update": 50}
    assert preset("ycsb-c").op_mix == {"read": 100}
    assert preset("ycsb-a", ops_total=7).ops_total == 7


def test_spec_validation():
    with pytest.raises(ConfigError):
        WorkloadSpec("x", {"read": 60, "update": 30})
    with pytest.raises(ConfigError):
        WorkloadSpec("x", {"read": 110, "update": -10})
    with pytest.raises(ConfigError):
        WorkloadSpec("x", {"teleport": 100})
    with pytest.raises(ConfigError):
        WorkloadSpec("x", {"read": 100}, object_size=4000)
    with pytest.raises(ConfigError):
        WorkloadSpec("x", {"read": 100}, distribution="pareto")
    with pytest.raises(ConfigError):
        preset("ycsb-z")
    assert WorkloadSpec("x", {"R": 50, "u": 50}).op_mix == {"read": 50, "update": 50}


def test_workload_file(tmp_path):
    path = tmp_path / "w.json"
    path.write_text(json.dumps({"name": "mine", "op_mix": {"read": 20, "update": 80}, "ops_total": 30}))
    spec = load_workload(str(path), object_count=9)
    assert spec.name == "mine" and spec.object_count == 9 and spec.ops_total == 30
    with pytest.raises(ConfigError):
        load_workload(str(tmp_path / "missing.json"))
    path.write_text(json.dumps({"name": "bad", "op_mix": {"read": 100}, "colour": 1}))
    with pytest.raises(ConfigError):
        load_workload(str(path))


def test_stream_is_deterministic_and_follows_the_mix():
    spec = preset("ycsb-a", ops_total=20000, object_count=500)
    ops = generate(spec)
    assert ops == generate(spec)
    share = Counter(o.op for o in ops)["read"] / len(ops)
    assert abs(share - 0.5) < 0.02
    assert all(0 <= o.key < 500 for o in ops)


def test_inserts_take_fresh_keys():
    spec = preset("ycsb-d", ops_total=2000, object_count=100)
    inserts = [o.key for o in generate(spec) if o.op == "insert"]
    assert inserts == list(range(100, 100 + len(inserts)))
    assert len(inserts) < spec.insert_reserve


def test_scans_stay_in_range():
    spec = preset("ycsb-e", ops_total=500, object_count=50)
    live = 50
    for o in generate(spec):
        if o.op == "insert":
            live += 1
        else:
            assert 0 < o.count and o.key + o.count <= live


def test_zipfian_skew():
    import random
    z = ZipfianGenerator(1000, 0.99, random.Random(1))
    counts = Counter(z.next() for _ in range(50000))
    assert counts[0] > counts[1] > counts[10] > counts.get(500, 0)
    assert max(counts) < 1000


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2 ** 20))
def test_uniform_keys_in_range(n, seed):
    spec = WorkloadSpec("u", {"read": 50, "update": 50}, object_count=n, ops_total=50,
                        distribution="uniform", seed=seed)
    assert all(0 <= o.key < n for o in generate(spec))
