"""Exact dynamic mode decomposition, reconstruction and error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankError, ShapeError
from .ks import SnapshotMatrix

RANK_RTOL = 1e-10
MIN_EIG_MAGNITUDE = 1e-14


@dataclass(frozen=True)
class DmdModel:
    """Rank-r model z(t) = modes @ (amplitudes * exp(cont_eigs * (t - t_start))).

    ``reduced_operator`` and ``reduced_eigvecs`` are only set by exact DMD.
    """

    modes: np.ndarray
    cont_eigs: np.ndarray
    amplitudes: np.ndarray
    dt: float
    t_start: float
    reduced_operator: np.ndarray | None = None
    reduced_eigvecs: np.ndarray | None = None

    @property
    def rank(self):
        return self.cont_eigs.size

    @property
    def disc_eigs(self):
        return np.exp(self.cont_eigs * self.dt)

    def save(self, path):
        np.savez_compressed(path, **self.to_arrays())

    def to_arrays(self, prefix=""):
        return {
            prefix + "modes_real": self.modes.real,
            prefix + "modes_imag": self.modes.imag,
            prefix + "eigs_real": self.cont_eigs.real,
            prefix + "eigs_imag": self.cont_eigs.imag,
            prefix + "amplitudes_real": self.amplitudes.real,
            prefix + "amplitudes_imag": self.amplitudes.imag,
            prefix + "dt": np.float64(self.dt),
            prefix + "t_start": np.float64(self.t_start),
            prefix + "rank": np.int64(self.rank),
        }

    @classmethod
    def from_arrays(cls, f, prefix=""):
        return cls(
            modes=f[prefix + "modes_real"] + 1j * f[prefix + "modes_imag"],
            cont_eigs=f[prefix + "eigs_real"] + 1j * f[prefix + "eigs_imag"],
            amplitudes=f[prefix + "amplitudes_real"] + 1j * f[prefix + "amplitudes_imag"],
            dt=float(f[prefix + "dt"]),
            t_start=float(f[prefix + "t_start"]),
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            return cls.from_arrays(f)


@dataclass(frozen=True)
class ErrorReport:
    final_residual_2norm: float
    rel_frobenius: float
    wall_time_seconds: float

    def __post_init__(self):
        for name in ("final_residual_2norm", "rel_frobenius", "wall_time_seconds"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _as_data(Z, dt=None, t_start=0.0):
    """Return (values, dt, t_start) from a SnapshotMatrix or a bare array."""
    if isinstance(Z, SnapshotMatrix):
        return Z.values, Z.dt, float(Z.t_grid[0])
    values = np.asarray(Z)
    if values.ndim != 2:
        raise ShapeError("snapshot data must be 2-D")
    if dt is None:
        raise ShapeError("dt is required when passing a bare array")
    return values, float(dt), float(t_start)


def exact_dmd(Z, r, dt=None, t_start=0.0):
    """Exact DMD of rank ``r``.

    X and Y are the snapshot columns shifted by one step; the projected
    operator is ``U* Y V / S`` from the rank-r SVD of X and modes are taken on
    the Y side.  Amplitudes fit the first snapshot in the least-squares sense.
    """
    values, dt, t_start = _as_data(Z, dt, t_start)
    m, n = values.shape
    if n < 2:
        raise ShapeError("exact DMD needs at least 2 snapshot columns")
    if r < 1 or r > min(m, n - 1):
        raise RankError(f"rank {r} outside [1, {min(m, n - 1)}]", achievable=min(m, n - 1))
    X, Y = values[:, :-1], values[:, 1:]
    U, s, Vh = np.linalg.svd(X, full_matrices=False)
    numrank = int(np.sum(s > RANK_RTOL * s[0])) if s[0] > 0 else 0
    if r > numrank:
        raise RankError(f"rank {r} exceeds numerical rank {numrank} of the data", achievable=numrank)
    U, s, V = U[:, :r], s[:r], Vh[:r].conj().T
    YVs = Y @ V / s
    atilde = U.conj().T @ YVs
    lam, W = np.linalg.eig(atilde)
    if np.any(np.abs(lam) <= MIN_EIG_MAGNITUDE):
        bad = int(np.sum(np.abs(lam) <= MIN_EIG_MAGNITUDE))
        raise RankError(f"{bad} DMD eigenvalue(s) vanish; lower the rank", achievable=r - bad)
    modes = YVs @ W
    amplitudes = np.linalg.lstsq(modes, values[:, 0].astype(complex), rcond=None)[0]
    return DmdModel(
        modes=modes,
        cont_eigs=np.log(lam.astype(complex)) / dt,
        amplitudes=amplitudes,
        dt=dt,
        t_start=t_start,
        reduced_operator=atilde,
        reduced_eigvecs=W,
    )


def reconstruct(model, t_grid):
    """Complex m x len(t_grid) evaluation of the model; take ``.real`` for real data."""
    t = np.asarray(t_grid, dtype=float) - model.t_start
    dynamics = model.amplitudes[:, None] * np.exp(np.outer(model.cont_eigs, t))
    return model.modes @ dynamics


def error_report(Z, Zhat, wall_time=0.0):
    values = Z.values if isinstance(Z, SnapshotMatrix) else np.asarray(Z, dtype=float)
    Zhat = np.asarray(Zhat)
    if values.shape != Zhat.shape:
        raise ShapeError(f"shape mismatch: data {values.shape} vs reconstruction {Zhat.shape}")
    resid = values - Zhat
    norm = np.linalg.norm(values)
    rel = np.linalg.norm(resid) / norm if norm > 0 else float(np.linalg.norm(resid))
    return ErrorReport(
        final_residual_2norm=float(np.linalg.norm(resid[:, -1])),
        rel_frobenius=float(rel),
        wall_time_seconds=float(wall_time),
    )
