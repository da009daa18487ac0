import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohisac.association import (
    AssociationInfeasible,
    TupleLimitError,
    associate,
    association_cost,
    brute_force_assignment,
    enumerate_tuples,
    regression_matrix,
    residual_prefilter,
    solve_assignment,
    velocity_resolution,
    write_association_csv,
)
from cohisac.geometry import C0, Device, doppler_shift, linear_array, pairs

F0 = 26.5e9
DF = 31.25

# Doppler tuples and coarse locations of the two-target association example
ROW_1 = ([-483.0, -512.0, -512.0, -542.0], [1.06, 5.00])
ROW_4 = ([322.0, 342.0, 342.0, 361.0], [1.12, 4.91])


def _peaks(freq_lists):
    return {pr: [(f, 1.0) for f in fl] for pr, fl in freq_lists.items()}


def test_tuple_count_two_devices_two_targets():
    devs = linear_array([-1.5, 1.5])
    prs = pairs(devs)
    ts = enumerate_tuples(_peaks({p: [10.0, 20.0] for p in prs}), prs, 2)
    assert len(ts) == 16


def test_tuple_count_single_pair():
    ts = enumerate_tuples({(0, 0): [(1.0, 1), (2.0, 1), (3.0, 1)]}, [(0, 0)], 3)
    assert len(ts) == 3
    np.testing.assert_array_equal(ts.frequencies[:, 0], [1, 2, 3])


def test_tuple_lexicographic_order():
    prs = [(0, 0), (0, 1)]
    ts = enumerate_tuples(_peaks({(0, 0): [1.0, 2.0], (0, 1): [5.0, 6.0]}), prs, 2)
    np.testing.assert_array_equal(ts.frequencies, [[1, 5], [1, 6], [2, 5], [2, 6]])
    np.testing.assert_array_equal(ts.peak_index, list(itertools.product(range(2), repeat=2)))


def test_tuple_padding_and_strongest_kept():
    prs = [(0, 0), (0, 1)]
    peaks = {(0, 0): [(7.0, 1.0)], (0, 1): [(1.0, 0.1), (2.0, 5.0), (3.0, 4.0)]}
    ts = enumerate_tuples(peaks, prs, 2)
    assert set(ts.frequencies[:, 0]) == {0.0, 7.0}
    assert set(ts.frequencies[:, 1]) == {2.0, 3.0}
    assert np.all(ts.padded[:, 0] == (ts.frequencies[:, 0] == 0.0))
    assert not ts.padded[:, 1].any()


def test_tuple_cap():
    prs = [(i, j) for i in range(3) for j in range(3)]
    peaks = _peaks({p: [1.0, 2.0, 3.0] for p in prs})
    with pytest.raises(TupleLimitError, match="prefilter"):
        enumerate_tuples(peaks, prs, 3, cap=1000)
    kept = enumerate_tuples(peaks, prs, 3, cap=1000, keep=lambda F: F[:, 0] == 1.0)
    assert len(kept) == 3**8
    with pytest.raises(ValueError):
        enumerate_tuples(peaks, prs, 0)


def test_consistent_tuple_has_zero_cost():
    devs = linear_array([-1.5, -0.5, 1.5])
    prs = pairs(devs)
    x, v = np.array([0.8, 4.6]), np.array([1.2, -2.5])
    U = regression_matrix(devs, prs, x, F0)
    f = U @ v
    cost, best = association_cost(f, U)
    assert cost == pytest.approx(0.0, abs=1e-16 * np.sum(f**2) + 1e-18)
    np.testing.assert_allclose(best, v, atol=1e-10)
    # U row equals the geometric Doppler shift per unit velocity
    for i, (n, m) in enumerate(prs):
        assert f[i] == pytest.approx(doppler_shift(devs[n], devs[m], x, v, F0))


def test_rank_deficient_cost_is_infinite():
    devs = [Device((0.0, 0.0))]
    U = regression_matrix(devs, [(0, 0)], (0, 5), F0)
    c, v = association_cost(np.array([10.0]), U)
    assert c == np.inf and np.all(np.isnan(v))
    with pytest.raises(np.linalg.LinAlgError):
        velocity_resolution(U, DF)


def test_cost_permutation_invariance():
    devs = linear_array([-1.5, -0.5, 1.5])
    prs = pairs(devs)
    U = regression_matrix(devs, prs, (0.5, 5.0), F0)
    f = np.random.default_rng(3).normal(0, 300, len(prs))
    perm = np.random.default_rng(4).permutation(len(prs))
    c1, v1 = association_cost(f, U)
    c2, v2 = association_cost(f[perm], U[perm])
    assert c1 == pytest.approx(c2)
    np.testing.assert_allclose(v1, v2)


@pytest.mark.parametrize("freqs,loc,expected_v", [
    (ROW_1[0], ROW_1[1], [0.03, 3.08]),
    (ROW_4[0], ROW_4[1], [-0.05, -2.05]),
])
def test_example_rows_velocity(freqs, loc, expected_v):
    devs = linear_array([-1.5, 1.5])
    U = regression_matrix(devs, pairs(devs), loc, F0)
    _, v = association_cost(np.array(freqs), U)
    # the example shifts use the opposite spectral sign convention
    np.testing.assert_allclose(-v, expected_v, atol=0.05)


@pytest.mark.xfail(strict=True, reason="example costs are not reproducible from the example shifts")
@pytest.mark.parametrize("freqs,loc,expected_cost", [
    (ROW_1[0], ROW_1[1], 5.49),
    (ROW_4[0], ROW_4[1], 2.53),
])
def test_example_rows_cost(freqs, loc, expected_cost):
    devs = linear_array([-1.5, 1.5])
    U = regression_matrix(devs, pairs(devs), loc, F0)
    cost, _ = association_cost(np.array(freqs), U)
    assert cost == pytest.approx(expected_cost, rel=0.1)


def test_example_assignment_beats_greedy():
    # tuples x targets with the example costs; two extra tuples are worse everywhere
    C = np.array([[5.49, 5.69], [2.44, 2.53], [40.0, 41.0], [50.0, 52.0]])
    A = solve_assignment(C)
    assert list(A) == [0, 1]
    assert C[A, [0, 1]].sum() == pytest.approx(8.02)
    # greedy takes the globally cheapest entry (tuple 2 -> target 1) and is forced into 5.69
    assert C[1, 0] + C[0, 1] == pytest.approx(8.13)


def test_diagonal_assignment():
    C = np.full((5, 5), 10.0)
    np.fill_diagonal(C, 1.0)
    np.testing.assert_array_equal(solve_assignment(C), np.arange(5))


def test_random_square_matches_permutations():
    rng = np.random.default_rng(0)
    for _ in range(50):
        C = rng.uniform(0, 100, (4, 4))
        A = solve_assignment(C)
        _, best = brute_force_assignment(C)
        assert C[A, range(4)].sum() == pytest.approx(best)
        assert len(set(A)) == 4


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.integers(0, 4), st.integers(0, 2**31 - 1), st.booleans())
def test_rectangular_matches_bruteforce(Q, extra, seed, with_inf):
    rng = np.random.default_rng(seed)
    R = Q + extra
    C = rng.integers(0, 6, (R, Q)).astype(float)  # small ints force ties
    if with_inf:
        C[rng.uniform(size=C.shape) < 0.2] = np.inf
    _, best = brute_force_assignment(C)
    if not np.isfinite(best):
        with pytest.raises(AssociationInfeasible):
            solve_assignment(C)
        return
    A = solve_assignment(C)
    assert len(set(A.tolist())) == Q
    assert C[A, range(Q)].sum() == pytest.approx(best)


def test_infeasible_column_named():
    C = np.array([[1.0, np.inf], [2.0, np.inf]])
    with pytest.raises(AssociationInfeasible, match="target 1"):
        solve_assignment(C)
    with pytest.raises(AssociationInfeasible):
        solve_assignment(np.ones((1, 2)))
    with pytest.raises(ValueError):
        solve_assignment(np.array([[np.nan]]))


def test_velocity_resolution_three_metre_aperture():
    devs = linear_array([-1.5, 1.5])
    dv = velocity_resolution(regression_matrix(devs, pairs(devs), (1.0, 5.0), F0), DF)
    np.testing.assert_allclose(dv * 100, [3.19, 17.78], rtol=0.05)


def test_velocity_resolution_linear_in_doppler_resolution():
    devs = linear_array([-1.5, 0.0, 1.5])
    U = regression_matrix(devs, pairs(devs), (1.0, 5.0), F0)
    np.testing.assert_allclose(velocity_resolution(U, DF / 2), velocity_resolution(U, DF) / 2)


def test_velocity_resolution_hand_pinv():
    devs = linear_array([-1.5, 0.0, 1.5])
    prs = pairs(devs)
    x = np.array([1.0, 5.0])
    rows = []
    for n, m in prs:
        a, b = devs[n].position, devs[m].position
        u_tx = (x - a) / np.linalg.norm(x - a)
        u_rx = (b - x) / np.linalg.norm(b - x)
        rows.append(F0 / C0 * (u_tx - u_rx))
    U = np.array(rows)
    pinv = np.linalg.solve(U.T @ U, U.T)  # normal equations
    want = np.abs(pinv @ np.ones(len(prs))) * DF
    np.testing.assert_allclose(velocity_resolution(regression_matrix(devs, prs, x, F0), DF), want, rtol=1e-9)


def test_cross_range_velocity_resolution_shrinks_with_aperture():
    # only the cross-range component depends on angular diversity; the radial
    # one grows slightly as the bistatic angle widens
    prev = None
    for half in [0.5, 1.0, 1.5, 2.5]:
        devs = linear_array([-half, half])
        dv = velocity_resolution(regression_matrix(devs, pairs(devs), (0.3, 5.0), F0), DF)
        if prev is not None:
            assert dv[0] < prev[0]
        prev = dv


def _two_target_peaks(devs, xs, vs):
    prs = pairs(devs)
    return prs, {(n, m): [(doppler_shift(devs[n], devs[m], x, v, F0), 1.0) for x, v in zip(xs, vs)]
                 for n, m in prs}


def test_associate_recovers_truth():
    devs = linear_array([-1.5, -0.5, 0.0, 1.5])
    xs = [np.array([1.0, 5.0]), np.array([1.1, 5.0])]
    vs = [np.array([0.0, 3.0]), np.array([2.0, -1.0])]
    prs, peaks = _two_target_peaks(devs, xs, vs)
    res = associate(peaks, xs, devs, prs, F0, DF)
    for q in range(2):
        np.testing.assert_allclose(res.velocities[q], vs[q], atol=1e-6)
        assert res.costs[res.assignment[q], q] < 1e-8
    assert res.total_cost < 1e-8
    assert len(res.tuples) == 2 ** 16


def test_associate_single_target():
    devs = linear_array([-1.5, 1.5])
    x, v = np.array([0.4, 5.0]), np.array([0.5, 1.5])
    prs, peaks = _two_target_peaks(devs, [x], [v])
    res = associate(peaks, [x], devs, prs, F0, DF)
    assert res.assignment == [0]
    np.testing.assert_allclose(res.velocities[0], v, atol=1e-9)


def test_prefilter_keeps_optimum():
    rng = np.random.default_rng(5)
    devs = linear_array([-1.5, 0.0, 1.5])
    for _ in range(5):
        xs = [np.array([rng.uniform(-1, 1), rng.uniform(4, 6)]) for _ in range(2)]
        vs = [rng.uniform(-3, 3, 2) for _ in range(2)]
        prs, peaks = _two_target_peaks(devs, xs, vs)
        noisy = {p: [(f + rng.normal(0, 3), a) for f, a in v] for p, v in peaks.items()}
        full = associate(noisy, xs, devs, prs, F0, DF)
        fil = associate(noisy, xs, devs, prs, F0, DF, prefilter=True)
        assert len(fil.tuples) <= len(full.tuples)
        assert fil.total_cost == pytest.approx(full.total_cost)
        for q in range(2):
            np.testing.assert_allclose(fil.velocities[q], full.velocities[q])


def test_prefilter_predicate():
    devs = linear_array([-1.5, 1.5])
    U = regression_matrix(devs, pairs(devs), (0.0, 5.0), F0)
    good = U @ np.array([1.0, 2.0])
    keep = residual_prefilter([U], 1.0)
    assert list(keep(np.stack([good, good + [50, 0, 0, 0]]))) == [True, False]


def test_association_csv(tmp_path):
    devs = linear_array([-1.5, 1.5])
    xs = [np.array([1.0, 5.0]), np.array([1.1, 5.0])]
    prs, peaks = _two_target_peaks(devs, xs, [np.array([0, 3.0]), np.array([2.0, -1])])
    res = associate(peaks, xs, devs, prs, F0, DF)
    path = tmp_path / "a.csv"
    write_association_csv(path, res)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",")[:5] == ["tuple", "f_0_0_hz", "f_0_1_hz", "f_1_0_hz", "f_1_1_hz"]
    assert len(lines) == 1 + 16 * 2
    assert sum(int(l.rsplit(",", 1)[1]) for l in lines[1:]) == 2
