"""Recursive n-split segmentation of a snapshot time axis.

A split line is kept when the data ranges on its two sides differ (the
epsilon test) and the subinterval it closes is long enough (the delta test).
Kept lines trigger a recursive search inside the subinterval they close; a
pass that keeps nothing restarts from an evenly spaced guess with one more
line.  Everything runs on snapshot column indices, so every candidate line
sits on a snapshot time.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DomainError, EmptyIntervalError

_SLACK = 1e-9


@dataclass(frozen=True)
class SplitSet:
    """Ascending split lines ``t_0 = 0 < t_1 < ... < t_n = T``."""

    lines: tuple

    def __post_init__(self):
        lines = tuple(float(v) for v in self.lines)
        object.__setattr__(self, "lines", lines)
        if len(lines) < 2:
            raise DomainError("a split set needs at least the two endpoints")
        if not all(np.isfinite(lines)):
            raise DomainError("split lines must be finite")
        if lines[0] != 0.0:
            raise DomainError(f"first split line must be 0, got {lines[0]}")
        if any(b <= a for a, b in zip(lines, lines[1:])):
            raise DomainError(f"split lines must be strictly ascending: {lines}")

    @property
    def T(self):
        return self.lines[-1]

    @property
    def n(self):
        """Number of subintervals."""
        return len(self.lines) - 1

    @property
    def interior(self):
        return self.lines[1:-1]

    def intervals(self):
        return list(zip(self.lines[:-1], self.lines[1:]))

    @classmethod
    def whole(cls, T):
        return cls((0.0, T))

    @classmethod
    def from_interior(cls, T, interior):
        return cls((0.0, *sorted(interior), T))

    @classmethod
    def even(cls, T, num_pieces, t_grid=None):
        """``num_pieces`` equal subintervals, snapped to ``t_grid`` when given."""
        if num_pieces < 1:
            raise DomainError("need at least one piece")
        lines = np.linspace(0.0, T, num_pieces + 1)
        if t_grid is not None:
            t_grid = np.asarray(t_grid)
            lines = t_grid[np.abs(t_grid[None, :] - lines[:, None]).argmin(axis=1)]
            lines[0], lines[-1] = 0.0, T
        return cls(tuple(lines))

    def to_list(self):
        return list(self.lines)

    @classmethod
    def from_list(cls, values):
        return cls(tuple(values))


@dataclass(frozen=True)
class NsplitConfig:
    """Tolerances and search settings.

    ``merge_tolerance`` of ``None`` means half of delta (in time units).
    ``localize`` slides each kept line along the run of columns where the
    range contrast between its neighbouring windows is largest, stopping at
    the end of that run where the contrast falls off.
    """

    eps_fraction: float = 0.1
    delta_fraction: float = 0.1
    max_iterations_M: int = 200
    initial_num_splits: int = 4
    num_x_tests: int = 5
    rng_seed: int = 0
    consensus_threshold: float = 0.6
    merge_tolerance: float | None = None
    localize: bool = True

    def __post_init__(self):
        if not 0 < self.eps_fraction < 1:
            raise ConfigError("eps_fraction must lie in (0, 1)")
        if not 0 < self.delta_fraction < 1:
            raise ConfigError("delta_fraction must lie in (0, 1)")
        for name in ("max_iterations_M", "num_x_tests"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if int(self.initial_num_splits) != self.initial_num_splits or self.initial_num_splits < 0:
            raise ConfigError("initial_num_splits must be a non-negative integer")
        if not 0 < self.consensus_threshold <= 1:
            raise ConfigError("consensus_threshold must lie in (0, 1]")
        if self.merge_tolerance is not None and not self.merge_tolerance >= 0:
            raise ConfigError("merge_tolerance must be non-negative")

    def delta(self, T):
        return self.delta_fraction * T

    def merge_tol(self, T):
        return self.delta(T) / 2 if self.merge_tolerance is None else self.merge_tolerance

    def to_dict(self):
        return asdict(self)


class NsplitResult(NamedTuple):
    splits: SplitSet
    iterations: int
    stable: bool


def _columns(t_grid, t_a, t_b):
    slack = _SLACK * (t_grid[1] - t_grid[0] if t_grid.size > 1 else 1.0)
    idx = np.flatnonzero((t_grid >= t_a - slack) & (t_grid <= t_b + slack))
    return idx


def subinterval_range(Z, x_test, t_a, t_b):
    """(min, max) of row ``x_test`` over the columns with ``t_a <= t <= t_b``."""
    row = Z.values[x_test]
    idx = _columns(Z.t_grid, t_a, t_b) if t_a < t_b else np.array([], dtype=int)
    if idx.size == 0:
        raise EmptyIntervalError(f"no snapshot columns in [{t_a}, {t_b}]")
    seg = row[idx[0] : idx[-1] + 1]
    return float(seg.min()), float(seg.max())


def ranges_differ(left, right, eps):
    """Epsilon rule on two (min, max) pairs: False only when both bounds move by less than eps."""
    return not (abs(left[1] - right[1]) < eps and abs(left[0] - right[0]) < eps)


def _check_k(t_split, k):
    if not 1 <= k <= t_split.n - 1:
        raise IndexError(f"split index {k} outside [1, {t_split.n - 1}]")


def epsilon_test(Z, x_test, t_split, k, eps):
    _check_k(t_split, k)
    a, b, c = t_split.lines[k - 1 : k + 2]
    return ranges_differ(subinterval_range(Z, x_test, a, b), subinterval_range(Z, x_test, b, c), eps)


def delta_test(t_split, k, delta):
    """Length rule; the trailing subinterval is only checked for the last interior line."""
    _check_k(t_split, k)
    slack = _SLACK * t_split.T
    lines = t_split.lines
    if lines[k] - lines[k - 1] < delta - slack:
        return False
    if k == t_split.n - 1 and lines[k + 1] - lines[k] < delta - slack:
        return False
    return True


class _Search:
    """State of one n-split run on one spatial row, in column indices."""

    def __init__(self, row, t_grid, cfg, node, log):
        self.row = row
        self.t = t_grid
        self.cfg = cfg
        self.node = node
        self.log = log
        T = t_grid[-1] - t_grid[0]
        dt = t_grid[1] - t_grid[0]
        self.eps = cfg.eps_fraction * float(np.max(np.abs(row)))
        self.delta = cfg.delta(T)
        self.dcols = self.delta / dt * (1 - _SLACK)
        self.merge_cols = cfg.merge_tol(T) / dt * (1 - _SLACK)
        self.iterations = 0
        self.exhausted = False

    def tick(self, count=1):
        self.iterations += count
        if self.iterations >= self.cfg.max_iterations_M:
            self.exhausted = True

    def _emit(self, **rec):
        if self.log is not None:
            rec["node"] = self.node
            self.log.write(json.dumps(rec) + "\n")

    def contrast(self, a, b, c):
        left, right = self.row[a : b + 1], self.row[b : c + 1]
        return abs(left.max() - right.max()), abs(left.min() - right.min())

    def keeps(self, a, b, c, last):
        dmax, dmin = self.contrast(a, b, c)
        eps_ok = not (dmax < self.eps and dmin < self.eps)
        lead, trail = b - a, c - b
        delta_ok = lead >= self.dcols and (not last or trail >= self.dcols)
        self._emit(
            line=float(self.t[b]),
            eps=self.eps,
            max_diff=float(dmax),
            min_diff=float(dmin),
            delta=self.delta,
            lead=float(self.t[b] - self.t[a]),
            trail=float(self.t[c] - self.t[b]),
            verdict=bool(eps_ok and delta_ok),
        )
        return eps_ok and delta_ok

    def sweep(self, a, b, lines):
        """One left-to-right pass; a discarded line merges its two windows."""
        work = [a, *lines, b]
        k = 1
        while k < len(work) - 1:
            if self.keeps(work[k - 1], work[k], work[k + 1], last=k == len(work) - 2):
                k += 1
            else:
                del work[k]
        return work[1:-1]

    def prune(self, a, b, lines):
        while True:
            kept = self.sweep(a, b, lines)
            if kept == lines:
                return kept
            lines = kept

    def even_guess(self, a, b, count):
        if count < 1 or (b - a) / (count + 1) < self.dcols:
            return None
        pos = [a + int(round(j * (b - a) / (count + 1))) for j in range(1, count + 1)]
        return sorted({p for p in pos if a < p < b})

    def search(self, a, b, lines):
        """Kept lines strictly inside (a, b), starting from the candidates ``lines``."""
        count = len(lines)
        self.tick()
        kept = self.sweep(a, b, lines)
        while not kept and not self.exhausted:
            count += 1
            guess = self.even_guess(a, b, count)
            if guess is None:
                return []
            self.tick()
            kept = self.sweep(a, b, guess)
        out = []
        bounds = [a, *kept, b]
        for k in range(1, len(bounds) - 1):
            out.extend(self._refine(bounds[k - 1], bounds[k]))
            out.append(bounds[k])
        if kept:
            out.extend(self._refine(kept[-1], b))
        return out

    def _refine(self, a, b):
        if self.exhausted or b - a < 2 * self.dcols:
            return []
        return self.search(a, b, [(a + b) // 2])

    def merge(self, lines):
        groups = []
        for p in sorted(lines):
            if groups and p - groups[-1][-1] < self.merge_cols:
                groups[-1].append(p)
            else:
                groups.append([p])
        return [int(round(np.mean(g))) for g in groups]

    def localize(self, a, b, lines):
        """Move each line to the edge of its contrast plateau where the contrast drops.

        The contrast of a candidate c is the epsilon statistic of the windows
        [prev, c] and [c, next].  It peaks on a run of candidates that ends at
        the range change; the other end of the run is usually a delta bound.
        """
        moved = list(lines)
        gap = int(np.ceil(self.dcols))
        for k, p in enumerate(moved):
            prev = moved[k - 1] if k else a
            nxt = moved[k + 1] if k + 1 < len(moved) else b
            lo, hi = prev + gap, nxt - gap
            if hi < lo:
                continue
            seg = self.row[prev : nxt + 1]
            lmax = np.maximum.accumulate(seg)
            lmin = np.minimum.accumulate(seg)
            rmax = np.maximum.accumulate(seg[::-1])[::-1]
            rmin = np.minimum.accumulate(seg[::-1])[::-1]
            cand = np.arange(lo, hi + 1) - prev
            stat = np.maximum(np.abs(lmax[cand] - rmax[cand]), np.abs(lmin[cand] - rmin[cand]))
            top = np.flatnonzero(stat >= stat.max() * (1 - _SLACK))
            first, last = int(cand[top[0]]) + prev, int(cand[top[-1]]) + prev
            edges = [e for e, bound in ((first, lo), (last, hi)) if e != bound]
            if edges:
                moved[k] = min(edges, key=lambda e: (abs(e - p), e))
            elif not lo <= p <= hi:
                moved[k] = first
        return moved

    def settle(self, a, b, lines):
        """Merge, prune and optionally localize until the configuration stops changing."""
        for _ in range(len(lines) + 10):
            lines = self.prune(a, b, self.merge(lines))
            if not self.cfg.localize:
                return lines
            moved = self.localize(a, b, lines)
            if moved == lines:
                return lines
            lines = moved
        return self.prune(a, b, lines)


def _to_columns(t_grid, times):
    return sorted({int(np.abs(t_grid - v).argmin()) for v in times})


def n_split(Z, x_test, t_split_init=None, cfg=None, log=None):
    """Run the n-split search on row ``x_test`` of ``Z``.

    ``t_split_init`` defaults to ``cfg.initial_num_splits`` evenly spaced
    lines.  Returns ``(splits, iterations, stable)``; ``stable`` is False when
    the iteration budget ran out before a pass reproduced its own input.
    """
    cfg = cfg or NsplitConfig()
    t_grid = Z.t_grid
    if not 0 <= x_test < Z.values.shape[0]:
        raise IndexError(f"x_test={x_test} is not a spatial node index")
    T = float(t_grid[-1])
    search = _Search(Z.values[x_test], t_grid, cfg, int(x_test), log)
    a, b = 0, t_grid.size - 1
    if search.eps == 0:
        return NsplitResult(SplitSet.whole(T), 0, True)
    if t_split_init is None:
        count = cfg.initial_num_splits
        lines = sorted({int(round(j * b / (count + 1))) for j in range(1, count + 1)} - {a, b})
    else:
        lines = [p for p in _to_columns(t_grid, t_split_init.interior) if a < p < b]

    stable = False
    while not search.exhausted:
        found = search.settle(a, b, search.search(a, b, lines))
        if found == lines:
            stable = True
            break
        lines = found
    if not stable:
        lines = search.settle(a, b, lines)
    splits = SplitSet.from_interior(T, [float(t_grid[p]) for p in lines])
    return NsplitResult(splits, search.iterations, stable)


def _vote(runs, t_grid, merge_cols):
    """Single-linkage clusters of candidate lines with their supporting run count."""
    tagged = sorted((p, i) for i, lines in enumerate(runs) for p in lines)
    clusters = []
    for p, i in tagged:
        if clusters and p - clusters[-1][-1][0] < merge_cols:
            clusters[-1].append((p, i))
        else:
            clusters.append([(p, i)])
    return [(int(round(np.mean([p for p, _ in c]))), len({i for _, i in c})) for c in clusters]


def robust_split(Z, cfg=None, workers=None, log=None, return_runs=False):
    """Consensus of n-split runs over ``cfg.num_x_tests`` seeded random nodes.

    A line survives when runs from at least ``consensus_threshold`` of the
    nodes propose it (within the merge tolerance); survivors are the cluster
    means snapped to snapshot times, then pruned so every kept line passes the
    delta test and passes the epsilon test on at least the same fraction of
    nodes.  With ``return_runs`` the per-node ``(node, NsplitResult)`` pairs
    are returned as well.
    """
    cfg = cfg or NsplitConfig()
    t_grid = Z.t_grid
    T = float(t_grid[-1])
    m = Z.values.shape[0]
    rng = np.random.default_rng(cfg.rng_seed)
    nodes = sorted(int(v) for v in rng.choice(m, size=min(cfg.num_x_tests, m), replace=False))

    def one(node):
        return n_split(Z, node, None, cfg, log=None)

    if workers and workers > 1 and len(nodes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, nodes))
    else:
        results = [one(node) for node in nodes]
    if log is not None:
        for node, res in zip(nodes, results):
            log.write(json.dumps({"node": node, "lines": res.splits.to_list(), "stable": res.stable}) + "\n")

    runs = [_to_columns(t_grid, res.splits.interior) for res in results]
    dt = t_grid[1] - t_grid[0]
    merge_cols = cfg.merge_tol(T) / dt * (1 - _SLACK)
    need = cfg.consensus_threshold * len(nodes) * (1 - _SLACK)
    lines = sorted({p for p, support in _vote(runs, t_grid, merge_cols) if support >= need})
    lines = [p for p in lines if 0 < p < t_grid.size - 1]

    searches = [_Search(Z.values[node], t_grid, cfg, node, None) for node in nodes]
    while lines:
        bounds = [0, *lines, t_grid.size - 1]
        drop = None
        for k in range(1, len(bounds) - 1):
            a, p, c = bounds[k - 1 : k + 2]
            last = k == len(bounds) - 2
            votes = sum(s.keeps(a, p, c, last) for s in searches if s.eps > 0)
            if votes < need:
                drop = k - 1
                break
        if drop is None:
            break
        del lines[drop]

    splits = SplitSet.from_interior(T, [float(t_grid[p]) for p in lines])
    if return_runs:
        return splits, list(zip(nodes, results))
    return splits
