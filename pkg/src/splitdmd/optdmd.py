"""Optimized DMD: variable-projection exponential fitting with Levenberg-Marquardt.

The data are fitted in time-major orientation, ``Y = Z.T ~ E(alpha) @ B`` with
``E[k, j] = exp(alpha_j * t_k)``.  For fixed ``alpha`` the coefficients ``B``
are the linear least-squares solution, so only ``alpha`` is iterated on.  The
real and imaginary parts of each ``alpha_j`` are separate real unknowns;
parameter vectors are laid out as ``[Re alpha, Im alpha]``.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import orth

from .dmd import DmdModel, ErrorReport, error_report, exact_dmd, reconstruct
from .errors import ConfigError, InitError, ShapeError
from .ks import SnapshotMatrix


@dataclass(frozen=True)
class VarproConfig:
    max_iters: int = 100
    tol_residual: float = 1e-10
    tol_decrease: float = 1e-10
    lambda_init: float = 1.0
    lambda_down: float = 1.0 / 3.0
    lambda_up: float = 3.0
    max_lambda: float = 1e12
    tol_gradient: float = 1e-6
    clamp_factor: float = 10.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be positive")
        for name in ("tol_residual", "tol_decrease", "lambda_init", "max_lambda", "tol_gradient", "clamp_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.lambda_down < 1 < self.lambda_up:
            raise ConfigError("need 0 < lambda_down < 1 < lambda_up")

    def to_dict(self):
        return asdict(self)


@dataclass
class TraceRecord:
    iteration: int
    lam: float
    objective: float
    grad_norm: float
    accepted: bool


def jsonl_trace(stream):
    """Trace callback that writes one JSON object per record to ``stream``."""

    def emit(rec):
        stream.write(json.dumps(asdict(rec)) + "\n")

    return emit


class _Projection:
    """Variable-projection quantities at one ``alpha``."""

    def __init__(self, alpha, t, Y):
        self.alpha = alpha
        self.t = t
        E = np.exp(np.outer(t, alpha))
        U, s, Vh = np.linalg.svd(E, full_matrices=False)
        keep = s > s[0] * max(E.shape) * np.finfo(float).eps if s[0] > 0 else np.zeros(s.size, bool)
        self.rank_deficient = not np.all(keep)
        self.E = E
        self.U, self.s, self.Vh = U[:, keep], s[keep], Vh[keep]
        UhY = self.U.conj().T @ Y
        self.B = self.Vh.conj().T @ (UhY / self.s[:, None])
        self.rho = Y - self.U @ UhY
        self.objective = 0.5 * float(np.vdot(self.rho, self.rho).real)

    def pieces(self):
        """Column and row factors of the rank-one Jacobian terms.

        d rho / d Re(alpha_j) = -(PD_j B_j^T + G_j H_j^T)
        d rho / d Im(alpha_j) = -i (PD_j B_j^T - G_j H_j^T)
        """
        D = self.t[:, None] * self.E
        PD = D - self.U @ (self.U.conj().T @ D)
        G = self.U @ (self.Vh / self.s[:, None])
        H = self.rho.T @ D.conj()
        return PD, G, self.B.T, H


def _residual(alpha, t, Y):
    return _Projection(alpha, t, Y).rho


def varpro_jacobian(alpha, Z, t=None, projection=None):
    """Dense complex Jacobian of the projected residual, shape (n, m, 2r).

    ``Z`` is the space-by-time data (or a SnapshotMatrix); ``t`` defaults to the
    snapshot times relative to the first column.  The last axis runs over
    ``[Re alpha_1..r, Im alpha_1..r]``.  Only meant for small problems and
    checks; the solver works with :func:`compressed_jacobian`.
    """
    alpha = np.asarray(alpha, dtype=complex)
    t, Y = _time_major(Z, t)
    proj = projection or _Projection(alpha, t, Y)
    PD, G, Bt, H = proj.pieces()
    r = alpha.size
    J = np.empty((t.size, Y.shape[1], 2 * r), dtype=complex)
    for j in range(r):
        a = np.outer(PD[:, j], Bt[:, j])
        c = np.outer(G[:, j], H[:, j])
        J[:, :, j] = -(a + c)
        J[:, :, r + j] = -1j * (a - c)
    return J


def compressed_jacobian(proj):
    """Real Jacobian and residual of the same least-squares problem in a small basis.

    Every Jacobian column lies in span(Qu) x span(Qw) for orthonormal Qu, Qw
    built from the rank-one factors, so ``||J d + rho||`` equals
    ``||Jc d + rc||`` up to a constant independent of ``d``.
    """
    PD, G, Bt, H = proj.pieces()
    r = PD.shape[1]
    Qu = orth(np.hstack([PD, G]))
    Qw = orth(np.hstack([Bt, H]))
    pa, pg = Qu.conj().T @ PD, Qu.conj().T @ G
    qb, qh = Qw.conj().T @ Bt, Qw.conj().T @ H
    K = np.empty((Qu.shape[1], Qw.shape[1], 2 * r), dtype=complex)
    for j in range(r):
        a = np.outer(pa[:, j], qb[:, j])
        c = np.outer(pg[:, j], qh[:, j])
        K[:, :, j] = -(a + c)
        K[:, :, r + j] = -1j * (a - c)
    rho_core = Qu.conj().T @ proj.rho @ Qw.conj()
    K = K.reshape(-1, 2 * r)
    Jc = np.vstack([K.real, K.imag])
    rc = np.concatenate([rho_core.real.ravel(), rho_core.imag.ravel()])
    return Jc, rc


def lm_step(J, residual, lam):
    """Marquardt step: solve (J^T J + lam diag(J^T J)) d = -J^T r.

    Solved as the augmented least-squares problem [J; sqrt(lam) D] d = [-r; 0]
    so J^T J is never formed.  Raises ``LinAlgError`` on a non-finite result.
    """
    J = np.asarray(J, dtype=float)
    residual = np.asarray(residual, dtype=float)
    if not (np.all(np.isfinite(J)) and np.all(np.isfinite(residual))):
        raise np.linalg.LinAlgError("non-finite Jacobian or residual")
    diag = np.sum(J * J, axis=0)
    floor = max(float(diag.max(initial=0.0)) * 1e-14, np.finfo(float).tiny)
    scale = np.sqrt(np.maximum(diag, floor))
    if lam > 0:
        A = np.vstack([J, np.sqrt(lam) * np.diag(scale)])
        b = np.concatenate([-residual, np.zeros(J.shape[1])])
    else:
        A, b = J, -residual
    d = np.linalg.lstsq(A, b, rcond=None)[0]
    if not np.all(np.isfinite(d)):
        raise np.linalg.LinAlgError("damped system is singular")
    return d


@dataclass
class OptDmdResult:
    model: DmdModel
    report: ErrorReport
    alpha: np.ndarray
    coefficients: np.ndarray
    stopping_reason: str
    iterations: int
    objective: float
    grad_norm: float
    stagnated: bool
    clamped: bool
    rank_deficient: bool
    history: list = field(default_factory=list)


def _time_major(Z, t=None):
    if isinstance(Z, SnapshotMatrix):
        values = Z.values
        t_rel = Z.t_grid - Z.t_grid[0] if t is None else np.asarray(t, dtype=float)
    else:
        values = np.asarray(Z)
        if t is None:
            raise ShapeError("sample times are required when passing a bare array")
        t_rel = np.asarray(t, dtype=float)
    if values.ndim != 2 or values.shape[1] != t_rel.size:
        raise ShapeError("data columns must match the sample times")
    return t_rel, values.T


def optdmd(Z, r, init=None, cfg=None, trace=None):
    """Fit ``r`` continuous-time exponentials to the snapshot matrix ``Z``.

    Starts from ``init`` or, when omitted, the exact-DMD eigenvalues of ``Z``.
    Returns an :class:`OptDmdResult`; the model reconstructs ``Z`` with
    :func:`splitdmd.dmd.reconstruct`.
    """
    cfg = cfg or VarproConfig()
    if not isinstance(Z, SnapshotMatrix):
        raise ShapeError("optdmd expects a SnapshotMatrix")
    m, n = Z.shape
    if n < r + 1:
        raise ShapeError(f"need at least r+1={r + 1} snapshot columns, got {n}")
    start = time.perf_counter()
    t, Y = _time_major(Z)
    alpha = np.asarray(exact_dmd(Z, r).cont_eigs if init is None else init, dtype=complex).copy()
    if alpha.size != r:
        raise ShapeError(f"initial guess has {alpha.size} values, expected {r}")

    re_cap = cfg.clamp_factor / (t[-1] - t[0])
    clamped = bool(np.any(alpha.real > re_cap))
    alpha = np.minimum(alpha.real, re_cap) + 1j * alpha.imag

    if not np.all(np.isfinite(alpha)):
        raise InitError("initial eigenvalues must be finite")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            proj = _Projection(alpha, t, Y)
    except np.linalg.LinAlgError as exc:
        raise InitError(f"cannot project at the initial eigenvalues: {exc}") from exc
    if not np.isfinite(proj.objective):
        raise InitError("residual is not finite at the initial eigenvalues")
    rank_deficient = proj.rank_deficient
    lam = cfg.lambda_init
    history = [proj.objective]
    reason = "max_iters"
    iterations = 0

    for it in range(1, cfg.max_iters + 1):
        Jc, rc = compressed_jacobian(proj)
        grad = Jc.T @ rc
        gnorm = float(np.linalg.norm(grad))
        if proj.objective < cfg.tol_residual:
            reason = "residual"
            break
        if gnorm <= cfg.tol_gradient * (1 + proj.objective):
            reason = "gradient"
            break
        iterations = it
        while True:
            try:
                d = lm_step(Jc, rc, lam)
                step = d[:r] + 1j * d[r:]
                trial_alpha = alpha + step
                if np.any(trial_alpha.real > re_cap):
                    clamped = True
                    trial_alpha = np.minimum(trial_alpha.real, re_cap) + 1j * trial_alpha.imag
                trial = _Projection(trial_alpha, t, Y)
                ok = np.isfinite(trial.objective) and trial.objective < proj.objective
            except np.linalg.LinAlgError:
                ok = False
            if trace is not None:
                trace(TraceRecord(it, lam, trial.objective if ok else proj.objective, gnorm, bool(ok)))
            if ok:
                lam *= cfg.lambda_down
                break
            lam *= cfg.lambda_up
            if lam > cfg.max_lambda:
                break
        if not ok:
            reason = "damping"
            break
        decrease = proj.objective - trial.objective
        alpha, proj = trial_alpha, trial
        rank_deficient = rank_deficient or proj.rank_deficient
        history.append(proj.objective)
        if proj.objective < cfg.tol_residual:
            reason = "residual"
            break
        if decrease < cfg.tol_decrease * history[-2]:
            reason = "decrease"
            break

    Jc, rc = compressed_jacobian(proj)
    gnorm = float(np.linalg.norm(Jc.T @ rc))
    stagnated = gnorm > cfg.tol_gradient * (1 + proj.objective) and reason != "residual"

    Bt = proj.B.T
    norms = np.linalg.norm(Bt, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    model = DmdModel(
        modes=Bt / safe,
        cont_eigs=alpha.copy(),
        amplitudes=norms.astype(complex),
        dt=Z.dt,
        t_start=float(Z.t_grid[0]),
    )
    elapsed = time.perf_counter() - start
    report = error_report(Z, reconstruct(model, Z.t_grid).real, elapsed)
    return OptDmdResult(
        model=model,
        report=report,
        alpha=alpha,
        coefficients=proj.B,
        stopping_reason=reason,
        iterations=iterations,
        objective=proj.objective,
        grad_norm=gnorm,
        stagnated=bool(stagnated),
        clamped=clamped,
        rank_deficient=rank_deficient,
        history=history,
    )
