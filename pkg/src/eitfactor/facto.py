"""Factorization-method imaging: SVD of the data, Picard sums and the indicator.

For a sampling point ``z`` and a direction ``d`` the electrode projection
``p`` of the dipole test function is expanded in the left singular vectors of
the difference data. The Picard quotient

    f(z, d) = sum_i c_i^2 / s_i  /  sum_i c_i^2,     c_i = <p, u_i>

stays moderate when ``p`` lies in the range of the square root of the data
operator (``z`` inside an inclusion) and grows otherwise. The indicator is
``Ind(z) = 1 / sum_{d in S} f(z, d)``, min-max normalised over the grid.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DegenerateError
from .fem import DataMatrix
from .mesh import Mesh

logger = logging.getLogger(__name__)

EPS_RANK = 1e-12
ISO_LEVEL = 0.9
CUBE_DIRECTIONS = np.array([[a, b, c] for a in (1, -1) for b in (1, -1) for c in (1, -1)], dtype=float) / np.sqrt(3.0)


# ---------------------------------------------------------------------------
# singular value decomposition and the Picard quotient
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SvdTriplets:
    """Singular system of the (optionally area-weighted) data matrix.

    ``left`` has the singular vectors as columns (M, K), ``right`` likewise (N, K).
    ``weights`` are the square roots of the electrode weights of the inner
    product (all ones for the Euclidean one).
    """

    values: np.ndarray
    left: np.ndarray
    right: np.ndarray
    rank: int
    weights: np.ndarray

    def truncated(self, rank: int) -> "SvdTriplets":
        if not 1 <= rank <= len(self.values):
            raise ConfigError(f"truncation rank must lie in [1, {len(self.values)}]")
        return SvdTriplets(self.values, self.left, self.right, int(rank), self.weights)


def svd(data, eps_rank: float = EPS_RANK, inner: str = "euclidean") -> SvdTriplets:
    """Thin SVD of the data matrix with rank ``#{s_i > eps_rank * s_1}``.

    ``data`` is a :class:`DataMatrix` or a plain array. ``inner="area"``
    decomposes ``diag(sqrt|E_i|) A`` so that coefficients are taken in the
    area-weighted inner product on electrode vectors.
    """
    A = data.entries if isinstance(data, DataMatrix) else np.asarray(data, dtype=float)
    if inner == "euclidean":
        w = np.ones(A.shape[0])
    elif inner == "area":
        if not isinstance(data, DataMatrix):
            raise ConfigError("area-weighted inner product needs electrode areas")
        w = np.sqrt(data.areas)
    else:
        raise ConfigError(f"unknown inner product {inner!r}")
    if not np.any(A):
        raise DegenerateError("data matrix is zero: rank 0")
    U, s, Vt = np.linalg.svd(w[:, None] * A, full_matrices=False)
    rank = int(np.sum(s > eps_rank * s[0]))
    return SvdTriplets(s, U, Vt.T, rank, w)


def picard(coefficients, triplets: SvdTriplets, tail: bool = False):
    """Picard quotient ``f`` for projection vector(s) of shape (..., M).

    Returns ``+inf`` where the projection has no component in the retained
    singular subspace. With ``tail=True`` also returns the split sums
    ``(sum_{i <= R/2} c_i^2/s_i, sum_{i > R/2} c_i^2/s_i)``.
    """
    p = np.asarray(coefficients, dtype=float) * triplets.weights
    R = triplets.rank
    c2 = (p @ triplets.left[:, :R]) ** 2
    energy = c2.sum(axis=-1)
    weighted = c2 / triplets.values[:R]
    total = (p * p).sum(axis=-1)
    empty = energy <= 1e-24 * np.maximum(total, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(empty, np.inf, weighted.sum(axis=-1) / np.where(empty, 1.0, energy))
    if np.ndim(f) == 0:
        f = float(f)
    if tail:
        h = R // 2
        return f, weighted[..., :h].sum(axis=-1), weighted[..., h:].sum(axis=-1)
    return f


# ---------------------------------------------------------------------------
# sampling grid and indicator
# ---------------------------------------------------------------------------


@dataclass
class SamplingGrid:
    """Axis-aligned lattice; ``inside`` marks points kept for sampling (C order)."""

    origin: np.ndarray
    spacing: np.ndarray
    shape: tuple
    inside: np.ndarray
    h_loc: np.ndarray  # local mesh size at the kept points

    @property
    def all_points(self) -> np.ndarray:
        axes = [self.origin[k] + self.spacing[k] * np.arange(self.shape[k]) for k in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    @property
    def points(self) -> np.ndarray:
        return self.all_points[self.inside.ravel()]

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))


def sample_grid(mesh: Mesh, shape=(32, 32, 32), bounds=None, margin: float = 1.0) -> SamplingGrid:
    """Lattice over the bounding box keeping points at least ``margin * h_loc`` from the boundary.

    ``h_loc`` is the longest edge of the tet containing the point. Each axis
    with ``n`` points samples the box at cell centres, so a 1-point axis sits
    at the middle of the box.
    """
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError("grid shape needs three positive counts")
    lo, hi = mesh.bounding_box if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
    spacing = (hi - lo) / np.asarray(shape)
    origin = lo + 0.5 * spacing
    grid = SamplingGrid(origin, spacing, shape, np.zeros(shape, dtype=bool), np.zeros(0))
    pts = grid.all_points
    tet, _ = mesh.locate(pts)
    ok = tet >= 0
    h = np.zeros(len(pts))
    h[ok] = mesh.tet_sizes[tet[ok]]
    idx = np.nonzero(ok)[0]
    dist = mesh.distance_to_boundary(pts[idx])
    ok[idx] = dist >= margin * h[idx]
    grid.inside = ok.reshape(shape)
    grid.h_loc = h[ok]
    if not ok.any():
        raise ConfigError("no grid point lies inside the domain with the required margin")
    return grid


@dataclass
class IndicatorField:
    grid: SamplingGrid
    raw: np.ndarray  # Ind at the inside points
    normalized: np.ndarray
    directions: np.ndarray
    mode: str = "exact"
    n_infinite: int = 0
    degenerate: bool = False
    f_values: Optional[np.ndarray] = None  # (n_points, n_dirs)

    def volume(self, outside: float = -1.0) -> np.ndarray:
        """Normalised values on the full lattice, ``outside`` where not sampled."""
        out = np.full(self.grid.shape, outside, dtype=float)
        out[self.grid.inside] = self.normalized
        return out

    @property
    def argmax(self) -> np.ndarray:
        return self.grid.points[int(np.argmax(self.raw))]


def normalize(raw, strict: bool = True):
    raw = np.asarray(raw, dtype=float)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 1e-14 * max(abs(hi), 1e-300) or hi == lo:
        if strict:
            raise DegenerateError("indicator is constant over the grid; cannot normalise")
        return np.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def indicator_from_coefficients(grid: SamplingGrid, coefficients, triplets: SvdTriplets,
                                directions=CUBE_DIRECTIONS, mode: str = "exact",
                                strict: bool = True) -> IndicatorField:
    """Indicator from projections of shape (n_points, n_dirs, M)."""
    f = picard(coefficients, triplets)
    total = f.sum(axis=1)
    infinite = ~np.isfinite(total)
    with np.errstate(divide="ignore"):
        raw = np.where(infinite, 0.0, 1.0 / np.where(infinite, 1.0, total))
    if infinite.any():
        logger.info("%d grid points have no component in the data range", int(infinite.sum()))
    norm, degenerate = normalize(raw, strict)
    return IndicatorField(grid, raw, norm, np.asarray(directions), mode, int(infinite.sum()), degenerate, f)


def indicator(grid: SamplingGrid, triplets: SvdTriplets, projector, directions=CUBE_DIRECTIONS,
              strict: bool = True) -> IndicatorField:
    """Evaluate the indicator on the grid.

    ``projector`` provides ``coefficients(points, directions)`` returning the
    electrode projections of the dipole traces, e.g.
    :class:`eitfactor.greens.DipoleProjector`.
    """
    directions = np.asarray(directions, dtype=float)
    if directions.ndim != 2 or directions.shape[1] != 3:
        raise ConfigError("directions must be an (n, 3) array")
    coef, flags = projector.coefficients(grid.points, directions)
    field_ = indicator_from_coefficients(grid, coef, triplets, directions, getattr(projector, "mode", "exact"), strict)
    if flags is not None and "near_interface" in flags:
        n_near = int(np.count_nonzero(flags["near_interface"]))
        if n_near:
            logger.info("%d grid points lie within one mesh size of a conductivity interface", n_near)
    return field_


# ---------------------------------------------------------------------------
# thresholding and the localisation error
# ---------------------------------------------------------------------------


@dataclass
class Component:
    barycenter: list
    volume: float
    n_voxels: int


@dataclass
class ReconstructionReport:
    iso_level: float
    components: list
    grid_shape: list
    grid_spacing: list
    diameter: float
    empty: bool = False
    degenerate: bool = False
    errors: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    argmax: Optional[list] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReconstructionReport":
        d = dict(d)
        d["components"] = [Component(**c) for c in d.get("components", [])]
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ReconstructionReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def threshold_components(field_: IndicatorField, level: float = ISO_LEVEL,
                         diameter: float = float("nan")) -> ReconstructionReport:
    """6-connected components of ``{normalised >= level}`` with their barycenters."""
    if not 0 < level < 1:
        raise ConfigError("iso level must lie in (0, 1)")
    grid = field_.grid
    vol = field_.volume(outside=-np.inf)
    mask = vol >= level
    if field_.degenerate:
        mask[:] = False
    labels, n = ndimage.label(mask)
    comps = []
    if n:
        idx = np.arange(1, n + 1)
        counts = ndimage.sum_labels(mask, labels, idx)
        centers = np.array(ndimage.center_of_mass(mask, labels, idx)).reshape(n, 3)
        for k in range(n):
            bary = grid.origin + grid.spacing * centers[k]
            comps.append(Component([float(v) for v in bary], float(counts[k] * grid.cell_volume), int(counts[k])))
        comps.sort(key=lambda c: -c.volume)
    return ReconstructionReport(
        iso_level=float(level), components=comps, grid_shape=list(grid.shape),
        grid_spacing=[float(s) for s in grid.spacing], diameter=float(diameter),
        empty=not comps, degenerate=field_.degenerate,
        argmax=[float(v) for v in field_.argmax] if len(field_.raw) else None,
    )


def barycenter_error(report: ReconstructionReport, centers, diameter: Optional[float] = None,
                     axes: Sequence[int] = (0, 1, 2)) -> dict:
    """Localisation errors ``|C_true - C_est| / diam`` against the nearest component.

    ``axes`` restricts the distance to some coordinates (e.g. ``(0, 1)`` for a
    planar error). Ties in distance go to the larger component.
    """
    diam = report.diameter if diameter is None else float(diameter)
    if not np.isfinite(diam) or diam <= 0:
        raise ConfigError("domain diameter must be positive")
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    axes = list(axes)
    if report.empty:
        return {"per_inclusion": [None] * len(centers), "mean": None, "missing": True, "matched": []}
    bary = np.array([c.barycenter for c in report.components])
    volumes = np.array([c.volume for c in report.components])
    errs, matched = [], []
    for c in centers:
        dist = np.linalg.norm(bary[:, axes] - c[axes], axis=1)
        order = np.lexsort((-volumes, np.round(dist, 12)))
        k = int(order[0])
        matched.append(k)
        errs.append(float(min(dist[k] / diam, 1.0)))
    missing = len(report.components) < len(centers)
    return {"per_inclusion": errs, "mean": float(np.mean(errs)), "missing": bool(missing), "matched": matched}


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def write_vtk(field_: IndicatorField, path, title: str = "indicator") -> None:
    """Legacy ASCII STRUCTURED_POINTS file with scalar ``indicator`` (-1 outside)."""
    grid = field_.grid
    vals = field_.volume(outside=-1.0)
    nx, ny, nz = grid.shape
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx} {ny} {nz}",
        "ORIGIN " + " ".join(f"{v:.9g}" for v in grid.origin),
        "SPACING " + " ".join(f"{v:.9g}" for v in grid.spacing),
        f"POINT_DATA {nx * ny * nz}",
        "SCALARS indicator double 1",
        "LOOKUP_TABLE default",
    ]
    # VTK runs x fastest
    flat = vals.transpose(2, 1, 0).ravel()
    lines += [" ".join(f"{v:.9g}" for v in flat[i:i + 9]) for i in range(0, len(flat), 9)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk(path):
    """Read back a file written by :func:`write_vtk`: (values (nx, ny, nz), origin, spacing)."""
    text = Path(path).read_text().split("\n")
    header = {}
    k = 0
    while k < len(text) and not text[k].startswith("LOOKUP_TABLE"):
        parts = text[k].split()
        if parts:
            header[parts[0]] = parts[1:]
        k += 1
    dims = tuple(int(v) for v in header["DIMENSIONS"])
    origin = np.array(header["ORIGIN"], dtype=float)
    spacing = np.array(header["SPACING"], dtype=float)
    vals = np.array(" ".join(text[k + 1:]).split(), dtype=float)
    return vals.reshape(dims[::-1]).transpose(2, 1, 0), origin, spacing
