"""P1 finite elements for the continuum and complete electrode models.

Conductivities are piecewise constant per tet (evaluated at the centroid).
Gauges are imposed with one Lagrange multiplier, see
:class:`eitfactor.linalg.ConstrainedSolver`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .errors import (
    CompatibilityError,
    ConfigError,
    FormatError,
    GeometryError,
)
from .linalg import ConstrainedSolver
from .mesh import ElectrodeLayout, Mesh

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# conductivity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Inclusion:
    center: tuple
    radius: float
    value: float

    def contains(self, points):
        return np.linalg.norm(np.atleast_2d(points) - np.asarray(self.center), axis=1) < self.radius


@dataclass(frozen=True)
class ConductivityField:
    """Piecewise-constant background per region, spherical inclusions on top.

    ``gamma`` and ``gamma_signs`` model a relative background error: region
    ``r`` gets ``(1 + sign_r * gamma) * background[r]``. Inclusion values are
    absolute and are not perturbed.
    """

    background: dict
    inclusions: tuple = ()
    gamma: float = 0.0
    gamma_signs: dict = field(default_factory=dict)

    def __post_init__(self):
        bg = {int(k): float(v) for k, v in self.background.items()}
        object.__setattr__(self, "background", bg)
        incs = tuple(i if isinstance(i, Inclusion) else Inclusion(tuple(map(float, i[0])), float(i[1]), float(i[2]))
                     for i in self.inclusions)
        object.__setattr__(self, "inclusions", incs)
        object.__setattr__(self, "gamma_signs", {int(k): int(v) for k, v in self.gamma_signs.items()})
        if not bg:
            raise ConfigError("background conductivity map is empty")
        if any(v <= 0 or not np.isfinite(v) for v in bg.values()):
            raise ConfigError("background conductivity must be strictly positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        for inc in incs:
            if inc.value <= 0 or inc.radius <= 0:
                raise ConfigError("inclusion radius and value must be strictly positive")
        if any(v <= 0 for v in self.region_values().values()):
            raise ConfigError("perturbed background conductivity is not positive")

    @classmethod
    def constant(cls, value, regions=(1,)):
        return cls({r: value for r in regions})

    def region_values(self) -> dict:
        return {r: v * (1 + self.gamma_signs.get(r, 1) * self.gamma) for r, v in self.background.items()}

    @property
    def is_homogeneous(self) -> bool:
        return not self.inclusions and len(set(self.region_values().values())) == 1

    def background_only(self) -> "ConductivityField":
        return replace(self, inclusions=())

    def scaled(self, c: float) -> "ConductivityField":
        return replace(self, background={r: c * v for r, v in self.background.items()},
                       inclusions=tuple(Inclusion(i.center, i.radius, c * i.value) for i in self.inclusions))

    def region_value(self, tags) -> np.ndarray:
        vals = self.region_values()
        tags = np.asarray(tags)
        out = np.empty(tags.shape)
        for t in np.unique(tags):
            if int(t) not in vals:
                raise ConfigError(f"no background conductivity for region {int(t)}")
            out[tags == t] = vals[int(t)]
        return out

    def per_tet(self, mesh: Mesh) -> np.ndarray:
        """Conductivity of every tet, evaluated at its centroid."""
        sigma = self.region_value(mesh.tet_tags)
        for inc in self.inclusions:
            sigma[inc.contains(mesh.tet_centroids)] = inc.value
        return sigma

    def at(self, mesh: Mesh, points) -> np.ndarray:
        """Point values; the region comes from the containing tet of ``mesh``."""
        points = np.atleast_2d(points)
        tags = mesh.region_at(points)
        if (tags < 0).any():
            raise GeometryError("conductivity requested outside the mesh")
        sigma = self.region_value(tags)
        for inc in self.inclusions:
            sigma[inc.contains(points)] = inc.value
        return sigma

    def check_inside(self, mesh: Mesh) -> None:
        """Inclusion balls must lie strictly inside the domain."""
        for inc in self.inclusions:
            c = np.asarray(inc.center)[None]
            tet, _ = mesh.locate(c)
            if tet[0] < 0 or mesh.distance_to_boundary(c)[0] <= inc.radius:
                raise GeometryError(f"inclusion at {inc.center} does not lie strictly inside the domain")

    def fingerprint(self) -> str:
        import hashlib

        key = repr((sorted(self.background.items()), [(i.center, i.radius, i.value) for i in self.inclusions],
                    self.gamma, sorted(self.gamma_signs.items())))
        return hashlib.sha256(key.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def stiffness_matrix(mesh: Mesh, sigma_tet: np.ndarray) -> sparse.csr_matrix:
    """P1 stiffness ``sum_t sigma_t |t| grad(w_i) . grad(w_j)``."""
    G = mesh.tet_gradients
    local = np.einsum("t,tid,tjd->tij", sigma_tet * mesh.tet_volumes, G, G)
    rows = np.repeat(mesh.tets, 4, axis=1)
    cols = np.tile(mesh.tets, (1, 4))
    n = mesh.n_vertices
    return sparse.csr_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n))


def boundary_load(mesh: Mesh, facet_ids=None) -> np.ndarray:
    """``int w_j ds`` over a facet set, in full vertex numbering."""
    out = np.zeros(mesh.n_vertices)
    out[mesh.boundary_nodes] = mesh.facet_load(facet_ids)
    return out


def boundary_mass(mesh: Mesh, facet_ids=None) -> sparse.csr_matrix:
    """Facet mass matrix embedded in full vertex numbering."""
    Mb = mesh.facet_mass(facet_ids).tocoo()
    bn = mesh.boundary_nodes
    n = mesh.n_vertices
    return sparse.csr_matrix((Mb.data, (bn[Mb.row], bn[Mb.col])), shape=(n, n))


def _balanced(vec, what):
    vec = np.asarray(vec, dtype=float)
    scale = np.abs(vec).sum()
    if abs(vec.sum()) > 1e-12 * max(scale, 1e-300) and scale > 0:
        raise CompatibilityError(f"{what} does not sum to zero (sum = {vec.sum():.3e})")
    return vec


# ---------------------------------------------------------------------------
# continuum model
# ---------------------------------------------------------------------------


class NeumannSolver:
    """Factorised Neumann problem ``div(sigma grad u) = 0`` with ``int_Gamma u = 0``."""

    def __init__(self, mesh: Mesh, sigma: ConductivityField, method=None):
        self.mesh = mesh
        self.sigma = sigma
        self.sigma_tet = sigma.per_tet(mesh)
        self.K = stiffness_matrix(mesh, self.sigma_tet)
        self.gauge = boundary_load(mesh)
        self.solver = ConstrainedSolver(self.K, self.gauge, np.ones(mesh.n_vertices), method=method)

    def solve_load(self, b, g=0.0):
        return self.solver.solve(b, g)


def flux_to_nodal(mesh: Mesh, flux) -> np.ndarray:
    if callable(flux):
        return np.asarray(flux(mesh.vertices[mesh.boundary_nodes]), dtype=float)
    flux = np.asarray(flux, dtype=float)
    if flux.shape != (len(mesh.boundary_nodes),):
        raise ValueError("flux must have one value per boundary node")
    return flux


def solve_continuum(mesh: Mesh, sigma: ConductivityField, flux, solver: Optional[NeumannSolver] = None):
    """Weak Neumann solution with zero boundary mean.

    ``flux`` is a P1 boundary field (values on ``mesh.boundary_nodes``) or a
    callable evaluated there. Returns vertex values of ``u``.
    """
    g = flux_to_nodal(mesh, flux)
    Mb = mesh.facet_mass()
    load_b = Mb @ g
    total = load_b.sum()
    if abs(total) > 1e-10 * max(np.abs(load_b).sum(), 1e-300):
        raise CompatibilityError(f"boundary flux has nonzero mean (integral {total:.3e})")
    if solver is None:
        solver = NeumannSolver(mesh, sigma)
    b = np.zeros(mesh.n_vertices)
    b[mesh.boundary_nodes] = load_b
    return solver.solve_load(b)


class NtdOperator:
    """Discrete continuum Neumann-to-Dirichlet map on boundary nodes.

    ``matrix @ g`` gives boundary values of ``u`` for nodal flux ``g``.
    """

    def __init__(self, matrix, mass):
        self.matrix = matrix
        self.mass = mass

    def apply(self, flux):
        flux = np.asarray(flux, dtype=float)
        w = self.mass @ flux
        if abs(w.sum()) > 1e-10 * max(np.abs(w).sum(), 1e-300):
            raise CompatibilityError("flux is not zero-mean")
        return self.matrix @ flux


def ntd_continuum(mesh: Mesh, sigma0: ConductivityField, chunk: int = 256) -> NtdOperator:
    """Dense Neumann-to-Dirichlet matrix for a homogeneous background."""
    if not sigma0.is_homogeneous:
        raise ConfigError("ntd_continuum needs a homogeneous background; use the regular-part solver")
    solver = NeumannSolver(mesh, sigma0)
    bn = mesh.boundary_nodes
    nb = len(bn)
    Mb = mesh.facet_mass().toarray()
    out = np.empty((nb, nb))
    for start in range(0, nb, chunk):
        cols = slice(start, min(start + chunk, nb))
        B = np.zeros((mesh.n_vertices, cols.stop - start))
        B[bn] = Mb[:, cols]
        out[:, cols] = solver.solve_load(B)[bn]
    return NtdOperator(out, sparse.csr_matrix(Mb))


# ---------------------------------------------------------------------------
# complete electrode model
# ---------------------------------------------------------------------------


class CemSystem:
    """Assembled CEM system on vertex dofs followed by one dof per electrode.

    The weak form, with net injected currents ``I_i`` (sum zero)::

        int sigma grad u . grad v + sum_i 1/z_i int_{E_i} (u - U_i)(v - V_i) = sum_i I_i V_i

    and the gauge ``sum_i |E_i| U_i = 0``.
    """

    def __init__(self, mesh: Mesh, sigma: ConductivityField, layout: ElectrodeLayout):
        if (np.asarray(layout.contact_impedance) <= 0).any():
            raise ConfigError("contact impedance must be strictly positive")
        self.mesh = mesh
        self.sigma = sigma
        self.layout = layout
        nv, m = mesh.n_vertices, layout.n_electrodes
        self.n_vertices, self.n_electrodes = nv, m
        K = stiffness_matrix(mesh, sigma.per_tet(mesh))
        z = np.asarray(layout.contact_impedance, dtype=float)
        Me = sparse.csr_matrix((nv, nv))
        B = np.zeros((nv, m))
        for i, f in enumerate(layout.electrodes):
            Me = Me + boundary_mass(mesh, f) / z[i]
            B[:, i] = -boundary_load(mesh, f) / z[i]
        C = sparse.diags(layout.areas / z)
        self.volume_block = K.tocsr()
        self.stiffness = sparse.bmat([[K + Me, sparse.csr_matrix(B)],
                                      [sparse.csr_matrix(B.T), C]], format="csr")
        self.constraint = np.concatenate([np.zeros(nv), layout.areas])

    @cached_property
    def solver(self) -> ConstrainedSolver:
        return ConstrainedSolver(self.stiffness, self.constraint, np.ones(self.stiffness.shape[0]))


def assemble_cem(mesh: Mesh, sigma: ConductivityField, layout: ElectrodeLayout) -> CemSystem:
    return CemSystem(mesh, sigma, layout)


def solve_cem(system: CemSystem, current):
    """Potential ``u`` and electrode voltages ``U`` for net currents ``current`` (or columns of them)."""
    I = np.asarray(current, dtype=float)
    cols = I[:, None] if I.ndim == 1 else I
    if cols.shape[0] != system.n_electrodes:
        raise ValueError(f"expected {system.n_electrodes} electrode currents")
    for j in range(cols.shape[1]):
        _balanced(cols[:, j], "injected current")
    rhs = np.zeros((system.stiffness.shape[0], cols.shape[1]))
    rhs[system.n_vertices:] = cols
    X = system.solver.solve(rhs)
    u, U = X[: system.n_vertices], X[system.n_vertices:]
    if I.ndim == 1:
        return u[:, 0], U[:, 0]
    return u, U


@dataclass
class DataMatrix:
    """``M x N`` electrode voltages, one column per injected pattern."""

    entries: np.ndarray
    patterns: np.ndarray  # (N, M) integer currents
    areas: np.ndarray
    fingerprint: str = ""
    provenance: dict = field(default_factory=lambda: {"kind": "clean", "delta": 0.0, "seed": None})

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        self.patterns = np.asarray(self.patterns)
        self.areas = np.asarray(self.areas, dtype=float)
        m, n = self.entries.shape
        if self.patterns.shape != (n, m) or self.areas.shape != (m,):
            raise FormatError("data matrix, patterns and areas have inconsistent shapes")

    @property
    def shape(self):
        return self.entries.shape

    def to_dict(self) -> dict:
        m, n = self.entries.shape
        return {
            "m": m,
            "n": n,
            "entries": self.entries.ravel().tolist(),
            "patterns": self.patterns.tolist(),
            "areas": self.areas.tolist(),
            "fingerprint": self.fingerprint,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataMatrix":
        try:
            m, n = int(d["m"]), int(d["n"])
            entries = np.asarray(d["entries"], dtype=float).reshape(m, n)
            return cls(entries, np.asarray(d["patterns"]), np.asarray(d["areas"]),
                       d.get("fingerprint", ""), dict(d.get("provenance", {})))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"malformed data matrix: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DataMatrix":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"data file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc.msg}", exc.lineno) from None
        return cls.from_dict(d)


def ntd_cem(mesh: Mesh, sigma: ConductivityField, layout: ElectrodeLayout,
            patterns: Sequence, system: Optional[CemSystem] = None) -> DataMatrix:
    """Electrode voltages for every pattern, sharing one factorisation."""
    P = np.atleast_2d(np.asarray(patterns))
    if system is None:
        system = assemble_cem(mesh, sigma, layout)
    _, U = solve_cem(system, P.T.astype(float))
    return DataMatrix(U, P, layout.areas, layout.fingerprint())
