"""Doppler-space association: match per-pair Doppler peaks to coarse target
locations and recover velocity vectors by least squares.

Every combination of one peak per pair (a "tuple") is scored against every
coarse location by the residual of the LS velocity fit; a minimum-cost
rectangular assignment then picks one tuple per target.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import regression_row

TUPLE_CAP = 1_000_000


class AssociationInfeasible(RuntimeError):
    pass


class TupleLimitError(RuntimeError):
    pass


@dataclass
class TupleSet:
    """Candidate tuples: ``frequencies[p, i]`` is the peak chosen for pair i in tuple p."""

    frequencies: np.ndarray  # (P, N^2) Hz
    peak_index: np.ndarray  # (P, N^2) index into each pair's (padded) peak list
    padded: np.ndarray  # (P, N^2) True where a 0 Hz pseudo-peak was used
    pairs: list

    def __len__(self):
        return self.frequencies.shape[0]


@dataclass
class AssociationResult:
    assignment: list  # target q -> tuple index
    costs: np.ndarray  # (P, Q)
    velocities: list  # per target, (2,) m/s
    velocity_resolution: list  # per target, (2,) m/s
    tuples: TupleSet
    locations: list
    total_cost: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def frequencies(self, q: int) -> np.ndarray:
        return self.tuples.frequencies[self.assignment[q]]


def regression_matrix(devices, pairs, x, f0: float) -> np.ndarray:
    """U(x): one row (f0/c)(u_tx - u_rx) per (tx, rx) pair, shape (len(pairs), 2)."""
    return np.array([regression_row(devices[n], devices[m], x, f0) for n, m in pairs])


def _pinv_or_none(U: np.ndarray):
    if np.linalg.matrix_rank(U) < 2:
        return None
    return np.linalg.pinv(U)


def association_cost(freqs, U: np.ndarray):
    """LS residual ||f - U v||^2 and best-fit v for one tuple (N^2,) or a stack (P, N^2).

    Rank-deficient ``U`` gives cost +inf and NaN velocity.
    """
    F = np.atleast_2d(np.asarray(freqs, dtype=float))
    Up = _pinv_or_none(U)
    if Up is None:
        cost = np.full(F.shape[0], np.inf)
        v = np.full((F.shape[0], 2), np.nan)
    else:
        v = F @ Up.T
        r = F - v @ U.T
        cost = np.sum(r * r, axis=1)
    if np.ndim(freqs) == 1:
        return float(cost[0]), v[0]
    return cost, v


def velocity_resolution(U: np.ndarray, doppler_resolution: float) -> np.ndarray:
    """|pinv(U) 1| * doppler_resolution, per velocity component (m/s)."""
    Up = _pinv_or_none(U)
    if Up is None:
        raise np.linalg.LinAlgError("velocity regression matrix is rank deficient")
    return np.abs(Up @ np.ones(U.shape[0])) * doppler_resolution


def _padded_lists(peaks: dict, pairs, count: int):
    """Per pair: ``count`` frequencies (strongest kept, ascending), zero-padded."""
    lists, pads = [], []
    for pr in pairs:
        pk = sorted(peaks.get(pr, []), key=lambda t: -t[1])[:count]
        freqs = sorted(f for f, _ in pk)
        pad = [False] * len(freqs) + [True] * (count - len(freqs))
        freqs = freqs + [0.0] * (count - len(freqs))
        lists.append(np.array(freqs))
        pads.append(np.array(pad))
    return lists, pads


def enumerate_tuples(peaks: dict, pairs, count: int, cap: int = TUPLE_CAP,
                     keep=None, chunk: int = 65536) -> TupleSet:
    """All ``count``**len(pairs) tuples in lexicographic order (first pair varies slowest).

    ``peaks`` maps pair -> [(frequency, magnitude), ...].  ``keep`` is an optional
    vectorized predicate on a (B, N^2) frequency block; tuples it rejects are
    dropped (evaluated chunk-wise, so the cap only applies without it).
    """
    if count < 1:
        raise ValueError("need at least one target")
    lists, pads = _padded_lists(peaks, pairs, count)
    n = len(pairs)
    total = count ** n
    if total > cap and keep is None:
        raise TupleLimitError(f"{total} tuples exceed the cap of {cap}; enable the prefilter")
    radix = count ** np.arange(n - 1, -1, -1)
    F, I, Pd = [], [], []
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        digits = (idx[:, None] // radix[None, :]) % count
        freqs = np.stack([lists[i][digits[:, i]] for i in range(n)], axis=1)
        pad = np.stack([pads[i][digits[:, i]] for i in range(n)], axis=1)
        if keep is not None:
            mask = keep(freqs)
            digits, freqs, pad = digits[mask], freqs[mask], pad[mask]
        F.append(freqs)
        I.append(digits)
        Pd.append(pad)
    return TupleSet(np.concatenate(F), np.concatenate(I), np.concatenate(Pd), list(pairs))


def residual_prefilter(Us, threshold: float):
    """Predicate keeping tuples whose LS residual is below ``threshold`` for some location."""
    def keep(freqs):
        best = np.full(freqs.shape[0], np.inf)
        for U in Us:
            c, _ = association_cost(freqs, U)
            best = np.minimum(best, c)
        return best <= threshold
    return keep


def solve_assignment(C) -> np.ndarray:
    """Exact min-cost assignment of every column (target) to a distinct row (tuple).

    Shortest augmenting path with dual potentials (Jonker-Volgenant style),
    run on the transposed problem so the short side is augmented.  Returns the
    row index chosen for each column.  Entries may be +inf (forbidden).
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    R, Q = C.shape
    if np.any(np.isnan(C)) or np.any(C == -np.inf):
        raise ValueError("costs must be finite or +inf")
    for q in range(Q):
        if not np.any(np.isfinite(C[:, q])):
            raise AssociationInfeasible(f"target {q} has no finite-cost tuple")
    if R < Q:
        raise AssociationInfeasible(f"only {R} tuples for {Q} targets")
    A = C.T  # (Q, R): augment one target at a time
    n, m = A.shape
    u = np.zeros(n)
    v = np.zeros(m)
    col4row = np.full(n, -1)
    row4col = np.full(m, -1)
    for cur in range(n):
        shortest = np.full(m, np.inf)
        path = np.full(m, -1)
        remaining = np.ones(m, dtype=bool)
        SR = np.zeros(n, dtype=bool)
        SC = np.zeros(m, dtype=bool)
        i, min_val, sink = cur, 0.0, -1
        while sink < 0:
            SR[i] = True
            with np.errstate(invalid="ignore"):
                r = min_val + A[i] - u[i] - v
            better = remaining & (r < shortest)
            path[better] = i
            shortest[better] = r[better]
            cand = np.where(remaining, shortest, np.inf)
            lowest = cand.min()
            if not np.isfinite(lowest):
                raise AssociationInfeasible(f"target {cur} cannot be assigned a free tuple")
            ties = np.flatnonzero(cand == lowest)
            free = ties[row4col[ties] < 0]
            j = int(free[0] if free.size else ties[0])
            min_val = lowest
            SC[j] = True
            remaining[j] = False
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])
        u[cur] += min_val
        others = SR.copy()
        others[cur] = False
        rows = np.flatnonzero(others)
        u[rows] += min_val - shortest[col4row[rows]]
        v[SC] -= min_val - shortest[SC]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur:
                break
    return col4row.copy()


def brute_force_assignment(C) -> tuple[np.ndarray, float]:
    """Exhaustive search over injective column->row maps (test oracle)."""
    C = np.asarray(C, dtype=float)
    R, Q = C.shape
    best, best_cost = None, np.inf
    for rows in itertools.permutations(range(R), Q):
        c = C[list(rows), range(Q)].sum()
        if c < best_cost:
            best, best_cost = np.array(rows), c
    return best, best_cost


def associate(peaks: dict, locations, devices, pairs, f0: float, doppler_resolution: float,
              count: int | None = None, prefilter: bool = False, cap: int = TUPLE_CAP) -> AssociationResult:
    """Tuples x locations cost matrix, optimal assignment, per-target velocity and resolution."""
    locations = [np.asarray(x, dtype=float) for x in locations]
    Q = len(locations) if count is None else count
    if Q < 1 or len(locations) < Q:
        raise ValueError("need at least one location per target")
    Us = [regression_matrix(devices, pairs, x, f0) for x in locations[:Q]]
    keep = None
    if prefilter:
        keep = residual_prefilter(Us, 10 * doppler_resolution**2 * len(devices) ** 2)
    tuples = enumerate_tuples(peaks, pairs, Q, cap=cap, keep=keep)
    if len(tuples) == 0:
        raise AssociationInfeasible("prefilter removed every tuple")
    costs = np.stack([association_cost(tuples.frequencies, U)[0] for U in Us], axis=1)
    assign = solve_assignment(costs)
    vels, dvs = [], []
    for q, U in enumerate(Us):
        _, vq = association_cost(tuples.frequencies[assign[q]], U)
        vels.append(vq)
        try:
            dvs.append(velocity_resolution(U, doppler_resolution))
        except np.linalg.LinAlgError:
            dvs.append(np.full(2, np.nan))
    total = float(sum(costs[assign[q], q] for q in range(Q)))
    return AssociationResult(list(map(int, assign)), costs, vels, dvs, tuples, locations[:Q], total,
                             {"U": Us})


def write_association_csv(path, result: AssociationResult) -> None:
    """One row per (tuple, target): shifts, location, fitted velocity, cost, chosen flag."""
    pairs = result.tuples.pairs
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tuple", *[f"f_{n}_{m}_hz" for n, m in pairs], "target", "x_m", "y_m",
                    "vx_mps", "vy_mps", "cost_hz2", "chosen"])
        for q, x in enumerate(result.locations):
            U = result.diagnostics["U"][q]
            for p in range(len(result.tuples)):
                c, v = association_cost(result.tuples.frequencies[p], U)
                w.writerow([p, *[f"{f:.3f}" for f in result.tuples.frequencies[p]], q,
                            f"{x[0]:.4f}", f"{x[1]:.4f}", f"{v[0]:.4f}", f"{v[1]:.4f}",
                            f"{c:.4f}", int(result.assignment[q] == p)])
