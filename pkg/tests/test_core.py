import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lognn_mec.core import (
    GEN_EPS, Allocation, McInstance, PhysicalConstants, check_feasibility, compute_delay, generate_instance,
    optimal_delay_single, project_to_feasible, total_delay, transmission_rate,
)
from lognn_mec.errors import InvalidArgumentError, NumericError

from oracles import instance_lists, rate_loop, single_pair_optimum, total_delay_loop


def _random_point(rng, n, m):
    inst = generate_instance(n, m, int(rng.integers(1 << 30)))
    alloc = project_to_feasible(rng.normal(0, 2, size=(n, m, 4)), inst)
    return inst, alloc


def test_generate_is_deterministic_and_clamped():
    a, b = generate_instance(6, 3, 7), generate_instance(6, 3, 7)
    for name in ("task_size", "server_compute", "channel_gain"):
        arr = getattr(a, name)
        np.testing.assert_array_equal(arr, getattr(b, name))
        assert arr.min() >= GEN_EPS and arr.max() <= 1.0
    assert a.channel_gain.shape == (6, 3)
    assert not np.array_equal(a.channel_gain, generate_instance(6, 3, 8).channel_gain)


@pytest.mark.parametrize("n, m", [(0, 2), (3, 0), (-1, 1)])
def test_generate_rejects_empty_sizes(n, m):
    with pytest.raises(InvalidArgumentError):
        generate_instance(n, m, 0)


def test_instance_validation():
    with pytest.raises(InvalidArgumentError):
        McInstance(np.ones(2), np.ones(3), np.ones((3, 2)))
    with pytest.raises(InvalidArgumentError):
        McInstance(np.ones(2), np.ones(1), np.array([[1.0], [0.0]]))
    with pytest.raises(InvalidArgumentError):
        PhysicalConstants(noise_power=0.0)


def test_instance_json_round_trip(tmp_path):
    inst = generate_instance(4, 2, 3)
    inst.save(tmp_path / "i.json")
    back = McInstance.load(tmp_path / "i.json")
    np.testing.assert_array_equal(back.channel_gain, inst.channel_gain)
    np.testing.assert_array_equal(back.task_size, inst.task_size)
    assert back.seed == 3 and back.noise_power == inst.noise_power
    data = json.loads((tmp_path / "i.json").read_text())
    assert set(data) == {"n_users", "n_servers", "task_size", "server_compute", "channel_gain", "bandwidth",
                         "noise_power", "compute_factor", "p_max", "seed"}
    assert len(data["channel_gain"]) == 4 and len(data["channel_gain"][0]) == 2


def test_rate_matches_loop_oracle(rng):
    for _ in range(100):
        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        inst, alloc = _random_point(rng, n, m)
        d, fs, h = instance_lists(inst)
        ref = np.array(rate_loop(d, fs, h, alloc.power.tolist(), inst.bandwidth, inst.noise_power))
        np.testing.assert_allclose(transmission_rate(inst, alloc.power), ref, rtol=1e-9, atol=0)


def test_total_delay_matches_loop_oracle(rng):
    for _ in range(100):
        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        inst, alloc = _random_point(rng, n, m)
        d, fs, h = instance_lists(inst)
        ref = total_delay_loop(d, fs, h, alloc.offload.tolist(), alloc.power.tolist(), alloc.compute.tolist())
        assert abs(total_delay(inst, alloc) - ref) <= 1e-9 * abs(ref)


def test_rate_worked_example():
    inst = McInstance([1.0, 1.0], [1.0], [[1.0], [1.0]], noise_power=1.0)
    r = transmission_rate(inst, np.array([[1.0], [1.0]]))
    # each user sees the other as interference: log2(1 + 1 / (1 + 1))
    np.testing.assert_allclose(r, np.log2(1.5))
    r0 = transmission_rate(inst, np.array([[1.0], [0.0]]))
    assert r0[0, 0] == pytest.approx(1.0) and r0[1, 0] == 0.0


def test_total_delay_skips_zero_offload_and_floors():
    inst = McInstance([1.0], [0.5], [[1.0]], noise_power=1.0)
    assert total_delay(inst, Allocation([[1.0]], [[1.0]], [[0.5]])) == pytest.approx(3.0)
    # zero offload and zero power: the 0 * (1 / 0) term is skipped
    assert total_delay(inst, Allocation([[0.0]], [[0.0]], [[0.0]])) == 0.0
    # positive offload with zero compute hits the floor rather than dividing by zero
    assert total_delay(inst, Allocation([[1.0]], [[1.0]], [[0.0]])) == pytest.approx(1.0 + 1e6)


def test_batched_total_delay_matches_singles(rng):
    inst = generate_instance(5, 3, 2)
    raw = rng.normal(size=(7, 5, 3, 4))
    batch = total_delay(inst, project_to_feasible(raw, inst))
    singles = [total_delay(inst, project_to_feasible(r, inst)) for r in raw]
    np.testing.assert_allclose(batch, singles, rtol=1e-12)


def test_compute_delay_shape():
    inst = generate_instance(3, 2, 0)
    alloc = project_to_feasible(np.zeros((3, 2, 4)), inst)
    cd = compute_delay(inst, alloc)
    np.testing.assert_allclose(cd, alloc.offload * inst.task_size[:, None] / alloc.compute)


def test_delay_permutation_invariant(rng):
    for _ in range(20):
        inst, alloc = _random_point(rng, 6, 3)
        pu, ps = rng.permutation(6), rng.permutation(3)
        perm = Allocation(alloc.offload[np.ix_(pu, ps)], alloc.power[np.ix_(pu, ps)], alloc.compute[np.ix_(pu, ps)])
        assert total_delay(inst.permuted(pu, ps), perm) == pytest.approx(total_delay(inst, alloc), rel=1e-12)


def test_delay_monotone_in_compute(rng):
    inst, alloc = _random_point(rng, 4, 3)
    base = total_delay(inst, alloc)
    for i in range(4):
        for j in range(3):
            f = alloc.compute.copy()
            f[i, j] *= 1.5
            assert total_delay(inst, Allocation(alloc.offload, alloc.power, f)) <= base


def test_delay_monotone_in_power_without_interference(rng):
    inst, alloc = _random_point(rng, 1, 4)
    base = total_delay(inst, alloc)
    for j in range(4):
        p = alloc.power.copy()
        p[0, j] *= 1.3
        assert total_delay(inst, Allocation(alloc.offload, p, alloc.compute)) <= base


@settings(max_examples=1000, deadline=None)
@given(n=st.integers(1, 20), m=st.integers(1, 10), seed=st.integers(0, 2**31),
       spread=st.floats(1e-3, 60.0))
def test_projection_always_feasible(n, m, seed, spread):
    rng = np.random.default_rng(seed)
    inst = generate_instance(n, m, seed)
    raw = rng.normal(0, spread, size=(n, m, 4))
    alloc = project_to_feasible(raw, inst)
    report = check_feasibility(inst, alloc)
    assert report.max_violation <= 1e-6
    assert np.all(alloc.offload > 0) and np.all(alloc.compute > 0) and np.all(alloc.power > 0)


def test_projection_rejects_bad_input():
    inst = generate_instance(2, 2, 0)
    with pytest.raises(InvalidArgumentError):
        project_to_feasible(np.zeros((2, 3, 4)), inst)
    raw = np.zeros((2, 2, 4))
    raw[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        project_to_feasible(raw, inst)


def test_check_feasibility_flags_each_constraint():
    inst = McInstance([1.0, 1.0], [1.0], [[1.0], [1.0]])
    ok = Allocation([[1.0], [1.0]], [[0.5], [0.5]], [[0.5], [0.5]])
    assert check_feasibility(inst, ok).feasible
    rows = check_feasibility(inst, Allocation([[0.5], [1.0]], [[0.5], [0.5]], [[0.5], [0.5]]))
    assert rows.offload_rows == pytest.approx(0.5) and not rows.feasible
    power = check_feasibility(inst, Allocation([[1.0], [1.0]], [[1.5], [0.5]], [[0.5], [0.5]]))
    assert power.power_budget == pytest.approx(0.5)
    compute = check_feasibility(inst, Allocation([[1.0], [1.0]], [[0.5], [0.5]], [[0.8], [0.5]]))
    assert compute.compute_budget == pytest.approx(0.3)
    neg = check_feasibility(inst, Allocation([[1.0], [1.0]], [[-0.1], [0.5]], [[0.5], [0.5]]))
    assert neg.power_nonneg == pytest.approx(0.1)


def test_optimal_delay_single_examples():
    inst = McInstance([1.0], [0.5], [[1.0]], noise_power=1.0)
    assert optimal_delay_single(inst) == pytest.approx(3.0)
    twice = McInstance([2.0], [0.5], [[1.0]], noise_power=1.0)
    assert optimal_delay_single(twice) == pytest.approx(6.0)
    rand = generate_instance(1, 1, 11)
    ref = single_pair_optimum(rand.task_size[0], rand.channel_gain[0, 0], rand.server_compute[0])
    assert optimal_delay_single(rand) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(InvalidArgumentError):
        optimal_delay_single(generate_instance(2, 1, 0))


def test_optimal_delay_single_is_a_lower_bound(rng):
    inst = generate_instance(1, 1, 5)
    best = optimal_delay_single(inst)
    delays = total_delay(inst, project_to_feasible(rng.normal(0, 3, size=(500, 1, 1, 4)), inst))
    assert np.all(delays >= best * (1 - 1e-12))
