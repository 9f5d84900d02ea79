"""Split DMD: one DMD or optimized-DMD model per time subinterval.

Each piece is fitted on its closed column block, so neighbouring pieces share
the boundary snapshot.  The assembled reconstruction is left-closed: a time on
an interior line belongs to the piece that starts there, and the last piece
also owns ``T``.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .dmd import DmdModel, error_report, exact_dmd, reconstruct
from .errors import ConfigError, DomainError, RankError
from .nsplit import NsplitConfig, SplitSet, robust_split
from .optdmd import VarproConfig, optdmd


class Method(str, Enum):
    STANDARD_DMD = "standard_dmd"
    OPTIMIZED_DMD = "optimized_dmd"

    @classmethod
    def parse(cls, value):
        aliases = {"dmd": cls.STANDARD_DMD, "od": cls.OPTIMIZED_DMD}
        if isinstance(value, cls):
            return value
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ConfigError(f"unknown method {value!r}; use dmd/od or {[m.value for m in cls]}") from None


@dataclass
class SplitDmdModel:
    splits: SplitSet
    pieces: list
    method: Method
    rank_r: int
    total_fit_time_seconds: float
    piece_fit_times: list = field(default_factory=list)
    segmentation_time_seconds: float = 0.0
    stopping_reasons: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.pieces) != self.splits.n:
            raise ConfigError(f"{len(self.pieces)} pieces for {self.splits.n} subintervals")
        for k, (piece, (a, _)) in enumerate(zip(self.pieces, self.splits.intervals())):
            if not np.isclose(piece.t_start, a, rtol=0, atol=1e-9 * max(1.0, self.splits.T)):
                raise ConfigError(f"piece {k} starts at {piece.t_start}, expected {a}")

    def metadata(self):
        return {
            "splits": self.splits.to_list(),
            "method": self.method.value,
            "rank_r": self.rank_r,
            "total_fit_time_seconds": self.total_fit_time_seconds,
            "piece_fit_times": list(self.piece_fit_times),
            "segmentation_time_seconds": self.segmentation_time_seconds,
            "stopping_reasons": list(self.stopping_reasons),
        }

    def save(self, path):
        arrays = {}
        for k, piece in enumerate(self.pieces):
            arrays.update(piece.to_arrays(prefix=f"piece{k}_"))
        np.savez_compressed(path, metadata=json.dumps(self.metadata()), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            meta = json.loads(str(f["metadata"]))
            splits = SplitSet.from_list(meta["splits"])
            pieces = [DmdModel.from_arrays(f, prefix=f"piece{k}_") for k in range(splits.n)]
        return cls(
            splits=splits,
            pieces=pieces,
            method=Method(meta["method"]),
            rank_r=int(meta["rank_r"]),
            total_fit_time_seconds=float(meta["total_fit_time_seconds"]),
            piece_fit_times=meta.get("piece_fit_times", []),
            segmentation_time_seconds=float(meta.get("segmentation_time_seconds", 0.0)),
            stopping_reasons=meta.get("stopping_reasons", []),
        )


def _snap(splits, Z):
    """Move every line onto its nearest snapshot time; the grid must start at 0."""
    t = Z.t_grid
    if abs(t[0]) > 1e-9 * max(1.0, abs(t[-1])) or not np.isclose(splits.T, t[-1], rtol=1e-9, atol=0):
        raise DomainError(f"splits cover [0, {splits.T}] but the data covers [{t[0]}, {t[-1]}]")
    cols = [int(np.abs(t - v).argmin()) for v in splits.lines]
    if any(b <= a for a, b in zip(cols, cols[1:])):
        raise ConfigError(f"split lines {splits.lines} collapse onto the same snapshot column")
    return SplitSet(tuple(float(t[c]) for c in cols)), cols


def _fit_piece(block, r, method, od_cfg):
    """Fit one block; the time covers the fit only, not the error evaluation."""
    if method is Method.STANDARD_DMD:
        start = time.perf_counter()
        model = exact_dmd(block, r)
        return model, time.perf_counter() - start, "direct"
    res = optdmd(block, r, cfg=od_cfg)
    return res.model, res.report.wall_time_seconds, res.stopping_reason


def split_dmd(Z, r, method, split, od_cfg=None, workers=None, include_segmentation_time=True):
    """Fit one rank-``r`` model per subinterval and assemble the reconstruction.

    ``split`` is an explicit :class:`SplitSet` or an :class:`NsplitConfig`, in
    which case the lines come from :func:`robust_split`.  Returns the
    :class:`SplitDmdModel` and the :class:`ErrorReport` of the assembly
    against all of ``Z``; the report's wall time is the model's total fit time.
    """
    method = Method.parse(method)
    od_cfg = od_cfg or VarproConfig()
    seg_time = 0.0
    if isinstance(split, NsplitConfig):
        start = time.perf_counter()
        split = robust_split(Z, split)
        seg_time = time.perf_counter() - start
    elif not isinstance(split, SplitSet):
        raise ConfigError("split must be a SplitSet or an NsplitConfig")
    splits, cols = _snap(split, Z)

    for k, (c0, c1) in enumerate(zip(cols, cols[1:])):
        if c1 - c0 + 1 < r + 1:
            a, b = splits.lines[k], splits.lines[k + 1]
            raise ConfigError(
                f"subinterval {k} [{a}, {b}] has {c1 - c0 + 1} snapshot columns; rank {r} needs {r + 1}. "
                "Raise delta or lower the rank."
            )

    def fit(k):
        try:
            return _fit_piece(Z.columns(cols[k], cols[k + 1]), r, method, od_cfg)
        except RankError as exc:
            a, b = splits.lines[k], splits.lines[k + 1]
            raise RankError(f"subinterval {k} [{a}, {b}]: {exc}", achievable=exc.achievable) from exc

    if workers and workers > 1 and splits.n > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fitted = list(pool.map(fit, range(splits.n)))
    else:
        fitted = [fit(k) for k in range(splits.n)]

    piece_times = [ft for _, ft, _ in fitted]
    total = sum(piece_times) + (seg_time if include_segmentation_time else 0.0)
    model = SplitDmdModel(
        splits=splits,
        pieces=[m for m, _, _ in fitted],
        method=method,
        rank_r=int(r),
        total_fit_time_seconds=total,
        piece_fit_times=piece_times,
        segmentation_time_seconds=seg_time,
        stopping_reasons=[reason for _, _, reason in fitted],
    )
    return model, error_report(Z, reconstruct_split(model, Z.t_grid), total)


def owner_index(splits, t_grid):
    """Index of the piece owning each time (left-closed, last piece closed)."""
    t = np.asarray(t_grid, dtype=float)
    slack = 1e-9 * max(1.0, splits.T)
    if np.any(t < -slack) or np.any(t > splits.T + slack):
        raise DomainError(f"times must lie in [0, {splits.T}]; no extrapolation")
    idx = np.searchsorted(np.asarray(splits.lines), t, side="right") - 1
    return np.clip(idx, 0, splits.n - 1)


def reconstruct_split(model, t_grid):
    """Real reconstruction at ``t_grid``, each time evaluated by its owning piece."""
    t = np.asarray(t_grid, dtype=float)
    owner = owner_index(model.splits, t)
    m = model.pieces[0].modes.shape[0]
    out = np.empty((m, t.size))
    for k, piece in enumerate(model.pieces):
        sel = np.flatnonzero(owner == k)
        if sel.size:
            out[:, sel] = reconstruct(piece, t[sel]).real
    return out


def shift_splits(splits, shift_seconds):
    """Move every interior line by ``shift_seconds``; the endpoints stay put."""
    interior = [v + shift_seconds for v in splits.interior]
    lines = (0.0, *interior, splits.T)
    if any(b <= a for a, b in zip(lines, lines[1:])):
        raise DomainError(f"shift {shift_seconds} breaks the ordering of {splits.lines}")
    return SplitSet(lines)
