"""Simulate / reconstruct / evaluate driven by an :class:`ExperimentConfig`."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError, IncompatibilityError
from .facto import (
    IndicatorField,
    ReconstructionReport,
    barycenter_error,
    indicator_from_coefficients,
    sample_grid,
    svd,
    threshold_components,
    write_vtk,
)
from .fem import ConductivityField, DataMatrix, Inclusion
from .greens import DipoleProjector
from .mesh import Mesh, build_layout, load_mesh
from .synth import PatternSet, add_noise, difference_data, farthest_pair_patterns, opposite_patterns, simulate

logger = logging.getLogger(__name__)

_MESHES: dict = {}


def cached_mesh(path) -> Mesh:
    """Meshes are immutable; parse each file once per process."""
    path = Path(path).resolve()
    key = (str(path), path.stat().st_mtime_ns)
    if key not in _MESHES:
        _MESHES[key] = load_mesh(path)
    return _MESHES[key]


def make_patterns(cfg: ExperimentConfig, mesh: Mesh, layout) -> PatternSet:
    spec = cfg.patterns
    kind = spec.get("kind")
    m = layout.n_electrodes
    if kind in ("opposite_ring", "opposite_per_ring"):
        rings = spec.get("rings") or [list(range(m))]
        return opposite_patterns(m, rings)
    if kind == "farthest_pairs":
        return farthest_pair_patterns(layout.centers(mesh), int(spec["n"]))
    if kind == "explicit":
        return PatternSet(np.asarray(spec["patterns"]), {"kind": "explicit"})
    raise ConfigError(f"unknown pattern kind {kind!r}")


def background(cfg: ExperimentConfig, perturbed: bool) -> ConductivityField:
    if perturbed and cfg.gamma:
        return ConductivityField(cfg.background, (), cfg.gamma, cfg.gamma_signs)
    return ConductivityField(cfg.background)


def _stamp(cfg: ExperimentConfig, extra: dict = None) -> dict:
    return {"config": cfg.echo(), "config_digest": cfg.digest(), **(extra or {})}


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


@dataclass
class SimulationResult:
    ref: DataMatrix
    meas: DataMatrix
    diff: DataMatrix


def run_simulate(cfg: ExperimentConfig, out: Optional[Path] = None) -> SimulationResult:
    """Reference, inclusion and difference data on the data mesh.

    Both maps use the (possibly gamma-perturbed) background; noise goes on
    the difference matrix once, or on each map with ``noise.target = per_map``.
    """
    mesh = cached_mesh(cfg.data_mesh)
    layout = build_layout(mesh, cfg.electrode_tags, cfg.contact_impedance)
    pats = make_patterns(cfg, mesh, layout)
    sigma0 = background(cfg, perturbed=True)
    sigma = ConductivityField(sigma0.background, tuple(Inclusion(tuple(i["center"]), i["radius"], i["value"])
                                                       for i in cfg.inclusions), sigma0.gamma, sigma0.gamma_signs)
    sigma.check_inside(mesh)
    t0 = time.perf_counter()
    ref = simulate(mesh, sigma0, layout, pats)
    meas = simulate(mesh, sigma, layout, pats)
    logger.info("simulated %d patterns in %.1f s", pats.n_patterns, time.perf_counter() - t0)
    if cfg.noise_target == "per_map" and cfg.delta > 0:
        ref = add_noise(ref, cfg.delta, cfg.seed)
        meas = add_noise(meas, cfg.delta, cfg.seed + 1)
        diff = difference_data(ref, meas)
    else:
        diff = add_noise(difference_data(ref, meas), cfg.delta, cfg.seed)
    for name, d in (("ref", ref), ("meas", meas), ("diff", diff)):
        d.provenance = {**d.provenance, **_stamp(cfg, {"role": name})}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        ref.save(out / "ref.json")
        meas.save(out / "meas.json")
        diff.save(out / "diff.json")
    return SimulationResult(ref, meas, diff)


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------


@dataclass
class ReconstructionResult:
    field: IndicatorField
    report: ReconstructionReport


def _coefficient_key(cfg, mesh, sigma0, layout, grid, mode) -> str:
    h = hashlib.sha256()
    for part in (mesh.fingerprint(), sigma0.fingerprint(), layout.fingerprint(), mode,
                 np.round(grid.origin, 12).tobytes(), np.round(grid.spacing, 12).tobytes(),
                 np.packbits(grid.inside).tobytes(), np.round(cfg.directions, 15).tobytes()):
        h.update(part if isinstance(part, bytes) else str(part).encode())
    return h.hexdigest()[:24]


def projection_coefficients(cfg: ExperimentConfig, mesh, layout, grid, mode: str, cache_dir=None):
    """Dipole projections on the grid, cached on disk when ``cache_dir`` is set."""
    sigma0 = background(cfg, perturbed=False)
    path = None
    if cache_dir is not None:
        key = _coefficient_key(cfg, mesh, sigma0, layout, grid, mode)
        path = Path(cache_dir) / f"projections_{key}.npz"
        if path.is_file():
            with np.load(path) as f:
                return f["coefficients"]
    t0 = time.perf_counter()
    coef, _ = DipoleProjector(mesh, sigma0, layout, mode).coefficients(grid.points, cfg.directions)
    logger.info("projected %d sampling points (%s) in %.1f s", len(coef), mode, time.perf_counter() - t0)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, coefficients=coef)
        tmp.replace(path)
    return coef


def run_reconstruct(cfg: ExperimentConfig, data: DataMatrix, out: Optional[Path] = None,
                    cache_dir=None, strict: bool = False) -> ReconstructionResult:
    mesh = cached_mesh(cfg.recon_mesh)
    layout = build_layout(mesh, cfg.electrode_tags, cfg.contact_impedance)
    if data.fingerprint != layout.fingerprint():
        raise IncompatibilityError("data were produced for a different electrode layout")
    triplets = svd(data, cfg.eps_rank, cfg.inner_product)
    if cfg.rank is not None:
        triplets = triplets.truncated(cfg.rank)
    grid = sample_grid(mesh, cfg.grid_shape, margin=cfg.grid_margin)
    coef = projection_coefficients(cfg, mesh, layout, grid, cfg.mode, cache_dir if cache_dir else cfg.cache_dir)
    fld = indicator_from_coefficients(grid, coef, triplets, cfg.directions, cfg.mode, strict=strict)
    report = threshold_components(fld, cfg.iso_level, mesh.diameter)
    report.config = _stamp(cfg, {"rank": triplets.rank, "n_points": int(len(coef)),
                                 "n_infinite": fld.n_infinite,
                                 "data_provenance": data.provenance.get("kind")})
    if len(cfg.inclusions) and not report.empty:
        report.errors = {"full": barycenter_error(report, cfg.true_centers),
                         "planar": barycenter_error(report, cfg.true_centers, axes=(0, 1))}
        if report.argmax is not None:
            report.errors["argmax_cells"] = float(
                np.min(np.linalg.norm((cfg.true_centers - report.argmax) / grid.spacing, axis=1)))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_vtk(fld, out / "indicator.vtk", title=f"indicator {cfg.name} {cfg.mode}")
        report.save(out / "report.json")
    return ReconstructionResult(fld, report)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def metrics_row(label: str, report: ReconstructionReport) -> dict:
    full = report.errors.get("full", {}) if report.errors else {}
    planar = report.errors.get("planar", {}) if report.errors else {}
    return {
        "label": label,
        "mode": report.config.get("config", {}).get("mode"),
        "iso": report.iso_level,
        "components": len(report.components),
        "E_c": full.get("mean"),
        "E_c_planar": planar.get("mean"),
        "missing": bool(full.get("missing", report.empty)),
    }


def format_table(rows) -> str:
    """Aligned text table with 6 significant digits."""
    cols = ["label", "mode", "iso", "components", "E_c", "E_c_planar", "missing"]

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, bool):
            return "yes" if v else "no"
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    cells = [cols] + [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(row[k]) for row in cells) for k in range(len(cols))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells) + "\n"


def run_pipeline(cfg: ExperimentConfig, out: Path, cache_dir=None) -> ReconstructionResult:
    sim = run_simulate(cfg, out)
    return run_reconstruct(cfg, sim.diff, out, cache_dir=cache_dir)


def run_sweep(cfg: ExperimentConfig, out: Path, cache_dir=None) -> list:
    """Run the pipeline for every value of the configured sweep parameter."""
    rows = []
    for key, values in cfg.sweep.items():
        if key not in ("delta", "gamma", "iso_level", "mode"):
            raise ConfigError(f"cannot sweep over {key!r}")
        for v in values:
            sub = cfg.with_overrides(**{key: v})
            label = f"{cfg.name}:{key}={v}"
            res = run_pipeline(sub, Path(out) / f"{key}_{v}", cache_dir)
            rows.append(metrics_row(label, res.report))
    return rows


def evaluate(reports: dict) -> list:
    if not reports:
        raise ConfigError("no reports to evaluate")
    return [metrics_row(label, rep) for label, rep in reports.items()]


def write_metrics(rows, out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    (out / "metrics.txt").write_text(format_table(rows))
