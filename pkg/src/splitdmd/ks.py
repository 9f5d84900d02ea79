"""Kuramoto-Sivashinsky snapshot generator on the unit periodic domain.

The non-dimensional model is

    w_t + eps**2 w_xxxx = -2 eps w w_x - eps w_xx,   x in [0, 1) periodic,

with eps = 1/L**2.  Space is discretized with a Fourier pseudo-spectral
method (2/3-rule dealiasing) and time with fourth-order exponential time
differencing (ETDRK4, contour-integral coefficients).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, IntegrationError, ResolutionError, ShapeError


def nondimensionalize(L):
    """Return the non-dimensional parameter ``1/L**2`` for domain length ``L``."""
    L = float(L)
    if not np.isfinite(L) or L <= 0:
        raise DomainError(f"domain length must be positive, got {L!r}")
    return 1.0 / L**2


def unstable_wavenumbers(L):
    """Number of Fourier wavenumbers k >= 1 with positive linear growth (2 pi k < L)."""
    L = float(L)
    k = int(np.floor(L / (2 * np.pi)))
    if 2 * np.pi * k >= L:
        k -= 1
    return max(k, 0)


def _is_multiple(a, b, rtol=1e-9):
    q = a / b
    return abs(q - round(q)) <= rtol * max(1.0, abs(q))


@dataclass(frozen=True)
class KsConfig:
    """One Kuramoto-Sivashinsky scenario.

    ``perturb_amplitude`` is the upper bound of the uniform per-node
    perturbation added to the initial condition (0 disables it).
    ``imperfection`` is the standard deviation of an independent zero-mean
    Gaussian per-node perturbation that breaks the symmetry of the initial
    condition by a controlled, step-size independent amount.
    ``roundoff_filter`` zeroes Fourier coefficients whose magnitude falls
    below that fraction of the largest one after every step; it keeps the
    symmetric subspace of a symmetric initial condition free of rounding
    noise.  Set it to 0 to integrate unfiltered.
    """

    length_L: float
    num_nodes: int = 161
    final_time_T: float = 400.0
    dt_out: float = 0.2
    dt_int: float = 0.05
    perturb_amplitude: float = 0.0
    rng_seed: int = 0
    imperfection: float = 0.0
    roundoff_filter: float = 1e-13
    resolution_tol: float = 1e-6

    def __post_init__(self):
        if not np.isfinite(self.length_L) or self.length_L <= 0:
            raise ConfigError(f"length_L must be positive, got {self.length_L}")
        if int(self.num_nodes) != self.num_nodes or self.num_nodes < 16:
            raise ConfigError(f"num_nodes must be an integer >= 16, got {self.num_nodes}")
        needed = 4 * unstable_wavenumbers(self.length_L)
        if self.num_nodes < needed:
            raise ConfigError(
                f"num_nodes={self.num_nodes} too coarse for L={self.length_L}: "
                f"{unstable_wavenumbers(self.length_L)} unstable wavenumbers need >= {needed} nodes"
            )
        for name in ("final_time_T", "dt_out", "dt_int"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.dt_int > self.dt_out * (1 + 1e-12):
            raise ConfigError("dt_int must not exceed dt_out")
        if not _is_multiple(self.dt_out, self.dt_int):
            raise ConfigError(f"dt_out={self.dt_out} is not an integer multiple of dt_int={self.dt_int}")
        if not _is_multiple(self.final_time_T, self.dt_out):
            raise ConfigError(f"final_time_T={self.final_time_T} is not a multiple of dt_out={self.dt_out}")
        if self.perturb_amplitude < 0 or self.imperfection < 0:
            raise ConfigError("perturb_amplitude and imperfection must be non-negative")
        if self.roundoff_filter < 0 or self.resolution_tol <= 0:
            raise ConfigError("roundoff_filter must be >= 0 and resolution_tol > 0")

    @property
    def epsilon_nd(self):
        return nondimensionalize(self.length_L)

    @property
    def steps_per_output(self):
        return int(round(self.dt_out / self.dt_int))

    @property
    def num_outputs(self):
        return int(round(self.final_time_T / self.dt_out)) + 1

    def x_grid(self):
        return np.arange(self.num_nodes) / self.num_nodes

    def t_grid(self):
        return np.arange(self.num_outputs) * self.dt_out

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known - {"epsilon_nd"}
        if extra:
            raise ConfigError(f"unknown KsConfig keys: {sorted(extra)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self):
        """Stable hash of the configuration, used as a snapshot cache key."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def perturbation(config):
    """Per-node uniform(0, perturb_amplitude) draws; zeros when unperturbed."""
    if config.perturb_amplitude == 0:
        return np.zeros(config.num_nodes)
    rng = np.random.default_rng(config.rng_seed)
    return rng.uniform(0.0, config.perturb_amplitude, size=config.num_nodes)


def imperfection(config):
    """Seeded N(0, imperfection**2) per-node draws, independent of the perturbation stream."""
    if config.imperfection == 0:
        return np.zeros(config.num_nodes)
    rng = np.random.default_rng([config.rng_seed, 1])
    return config.imperfection * rng.standard_normal(config.num_nodes)


def initial_profile(config):
    """Initial state on the config grid: sin(4 pi x)/sqrt(eps) plus both perturbations."""
    x = config.x_grid()
    return np.sin(4 * np.pi * x) / np.sqrt(config.epsilon_nd) + perturbation(config) + imperfection(config)


def initial_condition(config, x):
    """Evaluate the initial condition at ``x`` in [0, 1).

    Perturbations live on grid nodes, so each ``x`` picks up the draws of
    its nearest node.
    """
    xa = np.asarray(x, dtype=float)
    if np.any((xa < 0) | (xa >= 1)):
        raise DomainError("x must lie in [0, 1)")
    base = np.sin(4 * np.pi * xa) / np.sqrt(config.epsilon_nd)
    if config.perturb_amplitude == 0 and config.imperfection == 0:
        return base if xa.ndim else float(base)
    extra = perturbation(config) + imperfection(config)
    idx = np.rint(xa * config.num_nodes).astype(int) % config.num_nodes
    out = base + extra[idx]
    return out if xa.ndim else float(out)


def initial_slope(config, x):
    """Spatial derivative of the unperturbed initial condition.

    Only recorded for completeness: the model is first order in time.
    """
    xa = np.asarray(x, dtype=float)
    return 4 * np.pi * np.cos(4 * np.pi * xa) / np.sqrt(config.epsilon_nd)


@dataclass
class SnapshotMatrix:
    """Space-by-time data: ``values[i, k]`` is the state at ``x_grid[i]``, ``t_grid[k]``."""

    values: np.ndarray
    x_grid: np.ndarray
    t_grid: np.ndarray
    config: KsConfig | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float)
        self.x_grid = np.asarray(self.x_grid, dtype=float)
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        if self.values.ndim != 2:
            raise ShapeError("values must be a 2-D array")
        m, n = self.values.shape
        if self.x_grid.shape != (m,) or self.t_grid.shape != (n,):
            raise ShapeError(
                f"grid lengths ({self.x_grid.size}, {self.t_grid.size}) do not match values shape {(m, n)}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("snapshot values must be finite")
        if n > 1:
            steps = np.diff(self.t_grid)
            if np.any(steps <= 0):
                raise ShapeError("t_grid must be strictly ascending")
            if np.max(np.abs(steps - steps[0])) > 1e-9 * abs(steps[0]):
                raise ShapeError("t_grid must be uniformly spaced")

    @property
    def shape(self):
        return self.values.shape

    @property
    def dt(self):
        if self.t_grid.size < 2:
            raise ShapeError("a single snapshot has no time step")
        return float((self.t_grid[-1] - self.t_grid[0]) / (self.t_grid.size - 1))

    def index_of(self, t):
        """Index of the snapshot column nearest to time ``t``."""
        return int(np.argmin(np.abs(self.t_grid - t)))

    def columns(self, i0, i1):
        """Sub-matrix holding columns ``i0..i1`` inclusive."""
        return SnapshotMatrix(
            np.ascontiguousarray(self.values[:, i0 : i1 + 1]),
            self.x_grid,
            self.t_grid[i0 : i1 + 1],
            self.config,
        )

    def save(self, path):
        path = Path(path)
        cfg = json.dumps(self.config.to_dict()) if self.config is not None else ""
        np.savez_compressed(path, values=self.values, x_grid=self.x_grid, t_grid=self.t_grid, config=cfg)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as f:
            cfg = str(f["config"])
            config = KsConfig.from_dict(json.loads(cfg)) if cfg else None
            return cls(f["values"], f["x_grid"], f["t_grid"], config)

    def to_csv(self, path):
        """CSV layout: first row is ``t_grid`` (after a blank corner), first column ``x_grid``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([""] + [repr(float(t)) for t in self.t_grid])
            for x, row in zip(self.x_grid, self.values):
                w.writerow([repr(float(x))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        t = np.array([float(v) for v in rows[0][1:]])
        x = np.array([float(r[0]) for r in rows[1:]])
        vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(vals, x, t)


class _Etdrk4:
    """ETDRK4 stepper for v_t = lin * v + nonlin(v) with diagonal ``lin``."""

    def __init__(self, lin, dt, contour_points=64):
        self.dt = dt
        self.E = np.exp(dt * lin)
        self.E2 = np.exp(dt * lin / 2)
        roots = np.exp(1j * np.pi * (np.arange(1, contour_points + 1) - 0.5) / contour_points)
        LR = dt * lin[:, None] + roots[None, :]
        eLR = np.exp(LR)
        self.Q = dt * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=1))
        self.f1 = dt * np.real(np.mean((-4 - LR + eLR * (4 - 3 * LR + LR**2)) / LR**3, axis=1))
        self.f2 = dt * np.real(np.mean((2 + LR + eLR * (LR - 2)) / LR**3, axis=1))
        self.f3 = dt * np.real(np.mean((-4 - 3 * LR - LR**2 + eLR * (4 - LR)) / LR**3, axis=1))

    def step(self, v, nonlin):
        Nv = nonlin(v)
        a = self.E2 * v + self.Q * Nv
        Na = nonlin(a)
        b = self.E2 * v + self.Q * Na
        Nb = nonlin(b)
        c = self.E2 * a + self.Q * (2 * Nb - Nv)
        Nc = nonlin(c)
        return self.E * v + Nv * self.f1 + 2 * (Na + Nb) * self.f2 + Nc * self.f3


def growth_rates(config):
    """Linear growth rate eps (2 pi k)^2 - eps^2 (2 pi k)^4 per rfft wavenumber."""
    eps = config.epsilon_nd
    q = 2 * np.pi * np.fft.rfftfreq(config.num_nodes, 1.0 / config.num_nodes)
    return eps * q**2 - eps**2 * q**4


def tail_energy_fraction(values):
    """Largest fraction of spectral energy in the top third of the dealiased band, over columns."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[0] == 1:
        values = values.T
    n = values.shape[0]
    kmax = (n - 1) // 3
    spec = np.abs(np.fft.rfft(values, axis=0)[: kmax + 1]) ** 2
    total = spec.sum(axis=0)
    tail = spec[(2 * kmax) // 3 + 1 :].sum(axis=0)
    nz = total > 0
    if not np.any(nz):
        return 0.0
    return float(np.max(tail[nz] / total[nz]))


def simulate_ks(config, w0=None, nonlinear=True):
    """Integrate the KS model and return snapshots at t = 0, dt_out, ..., T.

    ``w0`` overrides the initial state (a vector on the config grid) and
    ``nonlinear=False`` drops the quadratic term; both exist for testing.
    """
    N = config.num_nodes
    w = initial_profile(config) if w0 is None else np.array(w0, dtype=float)
    if w.shape != (N,):
        raise ShapeError(f"initial state must have {N} entries")

    k = np.fft.rfftfreq(N, 1.0 / N)
    mask = k <= (N - 1) // 3
    deriv = -config.epsilon_nd * 2j * np.pi * k * mask  # -eps * d/dx applied to w**2
    stepper = _Etdrk4(growth_rates(config), config.dt_int)
    filt = config.roundoff_filter

    if nonlinear:
        def nonlin(v):
            u = np.fft.irfft(v * mask, N)
            return deriv * np.fft.rfft(u * u)
    else:
        def nonlin(v):
            return np.zeros_like(v)

    def clean(v):
        if filt > 0:
            v[np.abs(v) < filt * np.max(np.abs(v))] = 0.0
        return v

    v = clean(np.fft.rfft(w))
    out = np.empty((N, config.num_outputs))
    out[:, 0] = w
    t_grid = config.t_grid()
    nsub = config.steps_per_output
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(1, config.num_outputs):
            for _ in range(nsub):
                v = clean(stepper.step(v, nonlin))
            col = np.fft.irfft(v, N)
            if not np.all(np.isfinite(col)):
                raise IntegrationError(f"non-finite state at t={t_grid[j]:.6g}", time=float(t_grid[j]))
            out[:, j] = col

    frac = tail_energy_fraction(out)
    if frac > config.resolution_tol:
        raise ResolutionError(
            f"{frac:.3g} of the spectral energy sits in the top third of the resolved band "
            f"(tolerance {config.resolution_tol:g}); increase num_nodes"
        )
    return SnapshotMatrix(out, config.x_grid(), t_grid, config)
