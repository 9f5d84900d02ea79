"""Experiment harness: scenario specs, cached snapshots, result rows and grids.

Manifests are YAML documents of the form::

    seed: 0
    defaults:
      ks: {num_nodes: 161, final_time_T: 400.0}
      od: {max_iters: 100}
      nsplit: {eps_fraction: 0.1}
    experiments:
      - id: L12.6_od
        ks: {length_L: 12.6}
        rank: 11
        method: od
      - id: L12.6_split_od
        ks: {length_L: 12.6}
        rank: 11
        method: split_od
        split: {kind: explicit, num_pieces: 4}

``method`` is one of dmd, od, split_dmd, split_od.  ``split.kind`` is auto
(n-split consensus), explicit (``interior`` times or ``num_pieces`` even
pieces) or shifted (an explicit split plus ``shift`` seconds).  Per-experiment
``ks``/``od``/``nsplit`` maps override the defaults key by key.  The manifest
``seed`` fills ``rng_seed`` wherever an experiment leaves it unset.
"""

from __future__ import annotations

import csv
import io
import json
import platform
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .dmd import error_report, exact_dmd, reconstruct
from .driver import Method, reconstruct_split, shift_splits, split_dmd
from .errors import ConfigError, SplitDmdError
from .ks import KsConfig, SnapshotMatrix, simulate_ks
from .nsplit import NsplitConfig, SplitSet
from .optdmd import VarproConfig, optdmd

METHODS = ("dmd", "od", "split_dmd", "split_od")
SPLIT_KINDS = ("none", "auto", "explicit", "shifted")


class ExperimentError(SplitDmdError):
    """A scenario failed; the original exception is chained as ``__cause__``."""

    def __init__(self, scenario_id, exc):
        super().__init__(f"[{scenario_id}] {type(exc).__name__}: {exc}")
        self.scenario_id = scenario_id


@dataclass(frozen=True)
class SplitSource:
    kind: str = "none"
    interior: tuple | None = None
    num_pieces: int | None = None
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ConfigError(f"split kind must be one of {SPLIT_KINDS}, got {self.kind!r}")
        if self.kind in ("explicit", "shifted") and (self.interior is None) == (self.num_pieces is None):
            raise ConfigError("explicit splits need exactly one of 'interior' or 'num_pieces'")
        if self.interior is not None:
            object.__setattr__(self, "interior", tuple(float(v) for v in self.interior))

    def resolve(self, t_grid):
        """Explicit SplitSet for the data times; None for unsplit or auto."""
        T = float(t_grid[-1])
        if self.kind in ("none", "auto"):
            return None
        if self.interior is not None:
            base = SplitSet.from_interior(T, self.interior)
        else:
            base = SplitSet.even(T, self.num_pieces, t_grid)
        return shift_splits(base, self.shift) if self.kind == "shifted" else base

    def to_dict(self):
        d = {"kind": self.kind}
        if self.interior is not None:
            d["interior"] = list(self.interior)
        if self.num_pieces is not None:
            d["num_pieces"] = self.num_pieces
        if self.kind == "shifted":
            d["shift"] = self.shift
        return d


@dataclass(frozen=True)
class ExperimentSpec:
    scenario_id: str
    ks: KsConfig
    rank_r: int
    method: str
    split_source: SplitSource = SplitSource()
    od_cfg: VarproConfig = VarproConfig()
    nsplit_cfg: NsplitConfig = NsplitConfig()
    output_dir: Path = Path("results")

    def __post_init__(self):
        if not self.scenario_id:
            raise ConfigError("scenario_id must be non-empty")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if int(self.rank_r) != self.rank_r or self.rank_r < 1:
            raise ConfigError("rank_r must be a positive integer")
        split = self.method.startswith("split_")
        if split and self.split_source.kind == "none":
            raise ConfigError(f"{self.scenario_id}: split methods need a split source")
        if not split and self.split_source.kind != "none":
            raise ConfigError(f"{self.scenario_id}: unsplit methods take no split source")
        object.__setattr__(self, "output_dir", Path(self.output_dir))

    @property
    def base_method(self):
        return Method.parse(self.method.removeprefix("split_"))

    def to_dict(self):
        return {
            "id": self.scenario_id,
            "ks": self.ks.to_dict(),
            "rank": self.rank_r,
            "method": self.method,
            "split": self.split_source.to_dict(),
            "od": self.od_cfg.to_dict(),
            "nsplit": self.nsplit_cfg.to_dict(),
        }


@dataclass
class ResultRow:
    """One CSV line.  ``status`` is ok or failed; failed rows carry ``message``."""

    scenario_id: str
    method: str = ""
    n_split: int = 0
    length_L: float = float("nan")
    rank: int = 0
    final_residual_2norm: float = float("nan")
    rel_frobenius: float = float("nan")
    wall_time_seconds: float = float("nan")
    stopping_reason: str = ""
    splits: str = ""
    status: str = "ok"
    message: str = ""

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def to_csv_dict(self):
        d = asdict(self)
        for k in ("length_L", "final_residual_2norm", "rel_frobenius", "wall_time_seconds"):
            d[k] = repr(float(d[k]))
        return d

    @classmethod
    def from_csv_dict(cls, d):
        kw = {}
        for f in fields(cls):
            raw = d[f.name]
            kw[f.name] = int(raw) if f.type == "int" else float(raw) if f.type == "float" else raw
        return cls(**kw)


_cache_locks: dict = {}
_cache_guard = threading.Lock()


def load_snapshots(ks, cache_dir=None):
    """Simulate ``ks`` or reuse the cached snapshot file named by its digest."""
    if cache_dir is None:
        return simulate_ks(ks)
    cache_dir = Path(cache_dir)
    path = cache_dir / f"ks_{ks.digest()}.npz"
    with _cache_guard:
        lock = _cache_locks.setdefault(str(path), threading.Lock())
    with lock:
        if path.exists():
            return SnapshotMatrix.load(path)
        Z = simulate_ks(ks)
        cache_dir.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.stem + ".tmp.npz")
        Z.save(tmp)
        tmp.replace(path)
        return Z


def _fit(spec, Z):
    """One fit; returns (model, report, n_split, stopping_reason, splits, fit_seconds).

    ``n_split`` counts subintervals, with 0 for an unsplit fit.
    """
    method = spec.base_method
    if not spec.method.startswith("split_"):
        if method is Method.STANDARD_DMD:
            start = time.perf_counter()
            model = exact_dmd(Z, spec.rank_r)
            elapsed = time.perf_counter() - start
            report = error_report(Z, reconstruct(model, Z.t_grid).real, elapsed)
            return model, report, 0, "direct", SplitSet.whole(float(Z.t_grid[-1])), elapsed
        res = optdmd(Z, spec.rank_r, cfg=spec.od_cfg)
        splits = SplitSet.whole(float(Z.t_grid[-1]))
        return res.model, res.report, 0, res.stopping_reason, splits, res.report.wall_time_seconds
    source = spec.split_source.resolve(Z.t_grid) or spec.nsplit_cfg
    model, report = split_dmd(Z, spec.rank_r, method, source, spec.od_cfg)
    reasons = sorted(set(model.stopping_reasons))
    return model, report, model.splits.n, "/".join(reasons), model.splits, model.total_fit_time_seconds


def heatmap_triples(values, x_grid, t_grid, max_x=256, max_t=501):
    """(x, t, value) rows on a grid thinned to at most ``max_x`` by ``max_t`` points."""
    sx = max(1, -(-len(x_grid) // max_x))
    st = max(1, -(-len(t_grid) // max_t))
    xs, ts = x_grid[::sx], t_grid[::st]
    vals = values[::sx, ::st]
    X, Tm = np.meshgrid(xs, ts, indexing="ij")
    return np.column_stack([X.ravel(), Tm.ravel(), vals.ravel()])


def run_experiment(spec, cache_dir=None, repeats=3, write=True):
    """Run one scenario and return its :class:`ResultRow`.

    The reported wall time is the median over ``repeats`` fits; the fit is
    deterministic, so the stored model is the one from the last repeat.  With
    ``write`` the scenario directory receives model.npz, heatmap.csv (the
    reconstruction as x,t,value rows) and row.json.
    """
    try:
        Z = load_snapshots(spec.ks, cache_dir)
        times = []
        for _ in range(max(1, repeats)):
            model, report, n_pieces, reason, splits, elapsed = _fit(spec, Z)
            times.append(elapsed)
        row = ResultRow(
            scenario_id=spec.scenario_id,
            method=spec.method,
            n_split=n_pieces,
            length_L=spec.ks.length_L,
            rank=spec.rank_r,
            final_residual_2norm=report.final_residual_2norm,
            rel_frobenius=report.rel_frobenius,
            wall_time_seconds=statistics.median(times),
            stopping_reason=reason,
            splits=";".join(f"{v:g}" for v in splits.lines),
        )
        if write:
            out = spec.output_dir / spec.scenario_id
            out.mkdir(parents=True, exist_ok=True)
            model.save(out / "model.npz")
            if spec.method.startswith("split_"):
                recon = reconstruct_split(model, Z.t_grid)
            else:
                recon = reconstruct(model, Z.t_grid).real
            np.savetxt(
                out / "heatmap.csv",
                heatmap_triples(recon, Z.x_grid, Z.t_grid),
                delimiter=",",
                header="x,t,value",
                comments="",
                fmt="%.10g",
            )
            (out / "row.json").write_text(json.dumps({"spec": spec.to_dict(), "row": asdict(row)}, indent=2))
        return row
    except Exception as exc:
        raise ExperimentError(spec.scenario_id, exc) from exc


def machine_note():
    return f"{platform.machine()} {platform.system()} python {platform.python_version()} numpy {np.__version__}"


def write_csv(rows, path, seed):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed: {seed}\n# version: {__version__}\n# machine: {machine_note()}\n")
        writer = csv.DictWriter(fh, fieldnames=ResultRow.columns())
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_csv_dict())


def read_csv(path):
    """Rows and the ``# key: value`` metadata header of a results CSV."""
    meta = {}
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.splitlines(keepends=True)
    while lines and lines[0].startswith("#"):
        key, _, value = lines.pop(0)[1:].partition(":")
        meta[key.strip()] = value.strip()
    return [ResultRow.from_csv_dict(d) for d in csv.DictReader(io.StringIO("".join(lines)))], meta


def run_grid(manifest, csv_path, seed=0, workers=1, cache_dir=None, repeats=3, log=None):
    """Run every spec, write one CSV and return ``(rows, exit_code)``.

    Failures become rows with ``status`` failed; the exit code is 1 iff any
    row failed.
    """
    if not manifest:
        raise ConfigError("the manifest has no experiments")
    ids = [s.scenario_id for s in manifest]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate scenario ids in manifest: {sorted({i for i in ids if ids.count(i) > 1})}")

    def one(spec):
        try:
            row = run_experiment(spec, cache_dir=cache_dir, repeats=repeats)
        except ExperimentError as exc:
            row = ResultRow(
                scenario_id=spec.scenario_id,
                method=spec.method,
                length_L=spec.ks.length_L,
                rank=spec.rank_r,
                status="failed",
                message=str(exc),
            )
        if log is not None:
            log(row)
        return row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, manifest))
    else:
        rows = [one(spec) for spec in manifest]
    write_csv(rows, csv_path, seed)
    return rows, int(any(r.status != "ok" for r in rows))


def _merge(base, override):
    out = dict(base or {})
    out.update(override or {})
    return out


def specs_from_manifest(doc, output_dir="results", seed=None):
    """Build ExperimentSpecs from a parsed manifest; ``seed`` overrides the manifest seed."""
    if not isinstance(doc, dict) or not doc.get("experiments"):
        raise ConfigError("manifest must be a mapping with a non-empty 'experiments' list")
    seed = int(doc.get("seed", 0) if seed is None else seed)
    defaults = doc.get("defaults", {}) or {}
    specs = []
    for item in doc["experiments"]:
        try:
            ks = _merge(defaults.get("ks"), item.get("ks"))
            ks.setdefault("rng_seed", seed)
            ns = _merge(defaults.get("nsplit"), item.get("nsplit"))
            ns.setdefault("rng_seed", seed)
            split = dict(item.get("split") or {"kind": "none"})
            specs.append(
                ExperimentSpec(
                    scenario_id=str(item["id"]),
                    ks=KsConfig.from_dict(ks),
                    rank_r=int(item["rank"]),
                    method=item["method"],
                    split_source=SplitSource(**split),
                    od_cfg=VarproConfig(**_merge(defaults.get("od"), item.get("od"))),
                    nsplit_cfg=NsplitConfig(**ns),
                    output_dir=Path(output_dir),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad manifest entry {item!r}: {exc}") from exc
    return specs, seed


def load_manifest(path, output_dir="results", seed=None):
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return specs_from_manifest(doc, output_dir=output_dir, seed=seed)


def benchmark_manifest(final_time_T=400.0, dt_out=0.2, chaotic_nodes=1024, imperfection=1e-8):
    """Manifest document for the benchmark grid.

    The bifurcation cases use 161 nodes; the chaotic cases need
    ``chaotic_nodes`` to stay resolved.  ``imperfection`` breaks the mirror
    symmetry of the initial condition so the data carry asymmetric modes.
    Shortening ``final_time_T`` or coarsening ``dt_out`` is the desk-scale knob;
    the 10-piece splits and the shift scenarios require ``final_time_T`` to be a
    multiple of 10 * ``dt_out``.
    """
    base = {"final_time_T": final_time_T, "dt_out": dt_out, "dt_int": 0.05, "imperfection": imperfection}
    chaos = {"num_nodes": chaotic_nodes}
    exps = []

    def add(eid, L, r, method, split=None, nsplit=None, **ks):
        entry = {"id": eid, "ks": {"length_L": L, **ks}, "rank": r, "method": method}
        if split:
            entry["split"] = split
        if nsplit:
            entry["nsplit"] = nsplit
        exps.append(entry)

    even4 = {"kind": "explicit", "num_pieces": 4}
    even10 = {"kind": "explicit", "num_pieces": 10}
    add("L12.6_od", 12.6, 11, "od")
    add("L12.6_split4_od", 12.6, 11, "split_od", even4)
    add("L13.2_od", 13.2, 13, "od")
    add("L13.2_split4_od", 13.2, 13, "split_od", even4)
    add("L402.3_od", 402.3, 13, "od", **chaos)
    add("L402.3_split10_od", 402.3, 13, "split_od", even10, **chaos)
    add("L402.3_auto_od", 402.3, 13, "split_od", {"kind": "auto"}, {"initial_num_splits": 10}, **chaos)
    beta = {"perturb_amplitude": 1 / 20, **chaos}
    add("L402.3_beta_dmd", 402.3, 13, "dmd", **beta)
    add("L402.3_beta_split10_dmd", 402.3, 13, "split_dmd", even10, **beta)
    add("L402.3_beta_od", 402.3, 13, "od", **beta)
    add("L402.3_beta_split10_od", 402.3, 13, "split_od", even10, **beta)
    add("L402.35_od", 402.35, 13, "od", **chaos)
    add("L402.35_split10_od", 402.35, 13, "split_od", even10, **chaos)
    for s in (3, 1, -1, -3):
        add(f"L402.3_split10_shift{s:+d}_od", 402.3, 13, "split_od", {**even10, "kind": "shifted", "shift": float(s)}, **chaos)
    return {
        "seed": 0,
        "defaults": {"ks": base, "nsplit": {"initial_num_splits": 4}},
        "experiments": exps,
    }


def dump_manifest(doc, path):
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def aggregate(paths, out_path=None):
    """Concatenate result CSVs, sorted by scenario id; optionally write the merged file."""
    rows, seeds = [], set()
    for p in paths:
        part, meta = read_csv(p)
        rows.extend(part)
        seeds.add(meta.get("seed", ""))
    rows.sort(key=lambda r: r.scenario_id)
    if out_path is not None:
        write_csv(rows, out_path, ",".join(sorted(seeds)))
    return rows
