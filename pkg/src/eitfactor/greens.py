"""Dipole test functions of the background Neumann Green's function.

The dipole ``phi = d . grad_z N(., z)`` is split into the free-space dipole
``phi_hat = psi / sigma0(z)`` with ``psi = d.(x - z) / (4 pi |x - z|^3)`` and a
regular part ``V`` solving

    div(sigma0 grad V) = div[(sigma0(z) - sigma0) grad phi_hat]   in Omega
    sigma0 dV/dnu      = -sigma0 dphi_hat/dnu                      on Gamma
    int_Gamma V        = -int_Gamma phi_hat

so that ``phi = V + phi_hat`` has zero boundary mean. Everything is linear in
``d``; batched routines work with the three coordinate directions.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import factorized

from .errors import CompatibilityError, ConfigError, GeometryError, NumericError, QuadratureWarning
from .fem import ConductivityField, NeumannSolver, ntd_continuum
from .mesh import TRI_NODES, TRI_WEIGHTS, ElectrodeLayout, Mesh

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
MODES = ("exact", "free_space", "ntd_shortcut")
# volume source cells farther than this many cell sizes use the centroid rule
FAR_FACTOR = 4.0

_A, _B = 0.5854101966249685, 0.1381966011250105
TET4 = np.array([[_A, _B, _B, _B], [_B, _A, _B, _B], [_B, _B, _A, _B], [_B, _B, _B, _A]])


# ---------------------------------------------------------------------------
# free-space dipole
# ---------------------------------------------------------------------------


def free_dipole(z, d, x, sigma0z=1.0):
    """``d . grad_z (1 / (4 pi sigma0z |x - z|))`` at points ``x``."""
    z = np.asarray(z, dtype=float)
    r = np.atleast_2d(np.asarray(x, dtype=float)) - z
    dist = np.linalg.norm(r, axis=-1)
    if (dist == 0).any():
        raise GeometryError("dipole evaluated at its source point")
    out = (r @ np.asarray(d, dtype=float)) / (FOUR_PI * sigma0z * dist**3)
    return out if np.ndim(x) > 1 else out[0]


def _psi_basis(z, x):
    """Unit-conductivity dipole for d = e_1, e_2, e_3: shape (..., 3)."""
    r = x - z
    return r / (FOUR_PI * np.linalg.norm(r, axis=-1, keepdims=True) ** 3)


def _psi_hessian(z, x):
    """grad_x psi for d = e_k as a symmetric (..., 3, 3) array (index [a, k])."""
    r = x - z
    r2 = np.einsum("...i,...i", r, r)
    inv3 = r2**-1.5
    out = -3.0 * np.einsum("...a,...b->...ab", r, r) * (inv3 / r2)[..., None, None]
    out += np.eye(3) * inv3[..., None, None]
    return out / FOUR_PI


def _integrated_hessian(z, pts, w):
    """``sum_q w_q grad_x psi(pts_q)`` per cell: pts (t, q, 3), w (t, q) -> (t, 3, 3)."""
    r = pts - z
    r2 = np.einsum("tqi,tqi->tq", r, r)
    wr3 = w * r2**-1.5
    R = r * np.sqrt(3.0 * wr3 / r2)[..., None]
    out = -np.matmul(R.transpose(0, 2, 1), R)
    out += np.eye(3) * wr3.sum(axis=1)[:, None, None]
    return out / FOUR_PI


def _normal_derivative(z, pts, normals):
    """``d psi / d nu`` for d = e_k at pts (f, q, 3) with normals (f, 3) -> (f, q, 3)."""
    r = pts - z
    r2 = np.einsum("fqi,fqi->fq", r, r)
    inv3 = r2**-1.5
    nr = np.einsum("fqi,fi->fq", r, normals)
    out = normals[:, None, :] * inv3[..., None] - r * (3.0 * nr * inv3 / r2)[..., None]
    return out / FOUR_PI


# outward faces of a positively oriented tet
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def _single_layer_gradient(z, tri):
    """``grad_z int_T dA / |x - z|`` for flat triangles ``tri`` of shape (n, 3, 3).

    In-plane part from the edge integrals of ``1/R`` (closed-form logarithms),
    normal part from the signed solid angle.
    """
    r = tri - z
    R = np.linalg.norm(r, axis=2)
    e = np.roll(tri, -1, axis=1) - tri
    L = np.linalg.norm(e, axis=2)
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1)[:, None]
    m = np.cross(e, n[:, None, :]) / L[..., None]
    Rs = R + np.roll(R, -1, axis=1)
    edge = np.log((Rs + L) / (Rs - L))
    det = np.einsum("ni,ni->n", r[:, 0], np.cross(r[:, 1], r[:, 2]))
    dots = np.einsum("ni,ni->n", r[:, 0], r[:, 1]) * R[:, 2] + np.einsum("ni,ni->n", r[:, 0], r[:, 2]) * R[:, 1] \
        + np.einsum("ni,ni->n", r[:, 1], r[:, 2]) * R[:, 0]
    omega = 2.0 * np.arctan2(det, R.prod(axis=1) + dots)
    return -np.einsum("nei,ne->ni", m, edge) + n * omega[:, None]


def _facet_flux(z, tri):
    """Exact ``int_T d psi_k / d nu`` for flat triangles ``tri`` (n, 3, 3); shape (n, 3).

    Equals ``-grad_z Omega_T / (4 pi)`` with ``Omega_T`` the signed solid angle,
    whose gradient is a sum of closed-form edge terms.
    """
    ra = tri - z
    rb = np.roll(ra, -1, axis=1)
    na = np.linalg.norm(ra, axis=2)
    nb = np.roll(na, -1, axis=1)
    coef = (na + nb) / (na * nb * (na * nb + np.einsum("nei,nei->ne", ra, rb)))
    grad_omega = np.einsum("ne,nei->ni", coef, np.cross(ra, rb))
    return -grad_omega / FOUR_PI


def _exact_tet_integrals(z, tet_vertices):
    """``int_t grad psi`` for d = e_k, exactly, via the divergence theorem; (t, 3, 3).

    ``int_t d_a psi_k = d/dz_k sum_faces nu_a int_f ds / (4 pi |x - z|)``.
    """
    tri = tet_vertices[:, TET_FACES]  # (t, 4, 3, 3)
    flat = tri.reshape(-1, 3, 3)
    g = _single_layer_gradient(z, flat).reshape(-1, 4, 3)
    nrm = np.cross(tri[:, :, 1] - tri[:, :, 0], tri[:, :, 2] - tri[:, :, 0])
    nrm /= np.linalg.norm(nrm, axis=2)[..., None]
    return np.einsum("tfa,tfk->tak", nrm, g) / FOUR_PI


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass
class DipoleTrace:
    """Boundary values of a dipole test function on ``mesh.boundary_nodes``."""

    z: np.ndarray
    d: np.ndarray
    values: np.ndarray
    mode: str
    flags: dict = field(default_factory=dict)


@dataclass
class ElectrodeProjection:
    coefficients: np.ndarray
    z: Optional[np.ndarray] = None
    d: Optional[np.ndarray] = None
    mode: str = ""


def _unit(d):
    d = np.asarray(d, dtype=float)
    n = np.linalg.norm(d)
    if n == 0:
        raise ValueError("dipole direction must be nonzero")
    return d / n


# ---------------------------------------------------------------------------
# projector onto electrode-wise constants
# ---------------------------------------------------------------------------


def pm_weights(mesh: Mesh, layout: ElectrodeLayout, on: str = "nodes") -> sparse.csr_matrix:
    """Matrix of the L2 projector onto electrode-wise constants.

    Row ``i`` holds ``(int_{E_i} f + 1/M int_gap f) / |E_i|`` as weights on the
    P1 nodal values (``on="nodes"``) or on facet-wise constants (``on="facets"``).
    """
    m = layout.n_electrodes
    rows = []
    if on == "nodes":
        gap = mesh.facet_load(layout.gap_facets) if len(layout.gap_facets) else np.zeros(len(mesh.boundary_nodes))
        for i, f in enumerate(layout.electrodes):
            rows.append((mesh.facet_load(f) + gap / m) / layout.areas[i])
    elif on == "facets":
        gap = np.zeros(len(mesh.facets))
        gap[layout.gap_facets] = mesh.facet_areas[layout.gap_facets]
        for i, f in enumerate(layout.electrodes):
            r = gap / m
            r[f] = mesh.facet_areas[f]
            rows.append(r / layout.areas[i])
    else:
        raise ValueError("on must be 'nodes' or 'facets'")
    return sparse.csr_matrix(np.array(rows))


def project_pm(trace, layout: ElectrodeLayout, mesh: Mesh, on: str = "nodes") -> ElectrodeProjection:
    """Electrode coefficients of the projection of a zero-mean boundary field."""
    values = trace.values if isinstance(trace, DipoleTrace) else np.asarray(trace, dtype=float)
    if on == "nodes":
        w = mesh.facet_load()
    else:
        w = mesh.facet_areas
    mean = w @ values
    if abs(mean) > 1e-8 * max(np.abs(w) @ np.abs(values), 1e-300):
        raise CompatibilityError("project_pm expects a field with zero boundary mean")
    coef = pm_weights(mesh, layout, on) @ values
    if isinstance(trace, DipoleTrace):
        return ElectrodeProjection(coef, trace.z, trace.d, trace.mode)
    return ElectrodeProjection(coef)


# ---------------------------------------------------------------------------
# regular part
# ---------------------------------------------------------------------------


class _TetBlock:
    """Geometry of the cells carrying the volume source for one value of sigma0(z)."""

    def __init__(self, solver: "RegularPartSolver", index, sig_z):
        from scipy.spatial import cKDTree

        mesh = solver.mesh
        self.index = index
        self.centroids = np.ascontiguousarray(mesh.tet_centroids[index])
        self.volumes = mesh.tet_volumes[index]
        self.sizes = mesh.tet_sizes[index]
        self.delta = 1.0 - solver.sigma_tet[index] / sig_z
        self.quadrature = np.einsum("qk,tkd->tqd", TET4, mesh.vertices[mesh.tets[index]])
        self.tree = cKDTree(mesh.vertices[np.unique(mesh.tets[index])]) if len(index) else None


class RegularPartSolver:
    """Factorised background problem shared by all source points."""

    def __init__(self, mesh: Mesh, sigma0: ConductivityField):
        if sigma0.inclusions:
            raise ConfigError("the background conductivity must not contain inclusions")
        self.mesh = mesh
        self.sigma0 = sigma0
        self.sigma_tet = sigma0.per_tet(mesh)
        self.homogeneous = np.ptp(self.sigma_tet) == 0

    @cached_property
    def neumann(self) -> NeumannSolver:
        return NeumannSolver(self.mesh, self.sigma0)

    @cached_property
    def boundary_load(self) -> np.ndarray:
        return self.mesh.facet_load()

    def source_info(self, z):
        """Containing tet, background value, local size and interface flag at ``z``."""
        mesh = self.mesh
        z = np.atleast_2d(np.asarray(z, dtype=float))
        tet, _ = mesh.locate(z)
        if (tet < 0).any():
            raise GeometryError(f"source point {z[tet < 0][0]} lies outside the domain")
        sig = self.sigma_tet[tet]
        h = mesh.tet_sizes[tet]
        near = np.zeros(len(z), dtype=bool)
        if not self.homogeneous:
            # a vertex of a cell with another conductivity within one local mesh size
            for value in np.unique(sig):
                blk = self.block(value)
                sel = sig == value
                dist, _ = blk.tree.query(z[sel])
                near[sel] = dist < h[sel]
        return tet, sig, h, near

    def block(self, sig_z) -> "_TetBlock":
        """Tets whose background differs from ``sig_z`` (the volume source support)."""
        cache = self.__dict__.setdefault("_blocks", {})
        key = float(sig_z)
        if key not in cache:
            cache[key] = _TetBlock(self, np.nonzero(self.sigma_tet != key)[0], key)
        return cache[key]

    def volume_integrals(self, z, h_z, blk: "_TetBlock", coarse=None):
        """``(1 - sigma_t / sigma0(z)) int_t grad psi`` for d = e_k; shape (t, 3, 3).

        Cells far from ``z`` (relative to their size) use the centroid rule,
        the others the 4-point rule; cells within two local mesh sizes are
        integrated exactly. ``coarse`` may carry precomputed centroid-rule
        values.
        """
        mesh = self.mesh
        dist = np.linalg.norm(blk.centroids - z, axis=1)
        near = dist < 2.0 * np.maximum(h_z, blk.sizes)
        mid = np.nonzero((dist <= FAR_FACTOR * blk.sizes) & ~near)[0]
        if coarse is None:
            out = _integrated_hessian(z, blk.centroids[:, None], blk.volumes[:, None])
        else:
            out = coarse
        out[mid] = _integrated_hessian(z, blk.quadrature[mid], np.repeat(blk.volumes[mid, None] / 4, 4, axis=1))
        near = np.nonzero(near)[0]
        if len(near):
            out[near] = _exact_tet_integrals(z, mesh.vertices[mesh.tets[blk.index[near]]])
        out *= blk.delta[:, None, None]
        return out

    def boundary_flux(self, z):
        """``d psi / d nu`` for d = e_k at facet quadrature points, shape (nf, q, 3)."""
        mesh = self.mesh
        return _normal_derivative(z, mesh.quadrature_points, mesh.facet_normals)

    def flux_correction(self, z, dpsi=None):
        """Exact minus quadrature net flux of ``psi_k`` per facet, shape (nf, 3)."""
        mesh = self.mesh
        if dpsi is None:
            dpsi = self.boundary_flux(z)
        wq = mesh.facet_areas[:, None] * TRI_WEIGHTS[None]
        quad = np.einsum("fq,fqk->fk", wq, dpsi)
        return _facet_flux(z, mesh.vertices[mesh.facets]) - quad

    def load(self, z, d=None):
        """Load vector(s) of the regular-part problem and the gauge value(s).

        Returns ``(b, g, flags)`` with ``b`` of shape (nv, 3) for the three
        coordinate directions (or (nv,) when ``d`` is given).
        """
        mesh = self.mesh
        z = np.asarray(z, dtype=float)
        tet, sig, h, near = self.source_info(z)
        sz, hz = sig[0], h[0]
        nv = mesh.n_vertices
        b = np.zeros((nv, 3))
        blk = self.block(sz)
        if len(blk.index):
            F = self.volume_integrals(z, hz, blk)  # (t, a, k)
            loc = np.einsum("tja,tak->tjk", mesh.tet_gradients[blk.index], F)
            np.add.at(b, mesh.tets[blk.index].ravel(), loc.reshape(-1, 3))
        dpsi = self.boundary_flux(z)  # (nf, q, k)
        wq = mesh.facet_areas[:, None] * TRI_WEIGHTS[None]
        contrib = np.einsum("fq,fqk,qj->fjk", wq, dpsi, TRI_NODES)
        # the quadrature misses each facet's net flux slightly; restore the exact value
        contrib += self.flux_correction(z, dpsi)[:, None, :] / 3.0
        np.add.at(b, mesh.facets.ravel(), -contrib.reshape(-1, 3))
        # the exact facet fluxes cancel over the closed boundary; any rounding
        # residue is removed as a uniform flux (what the gauge multiplier would absorb)
        defect = b.sum(axis=0)
        scale = np.abs(contrib).sum(axis=(0, 1))
        b[mesh.boundary_nodes] -= np.outer(self.boundary_load, defect) / self.boundary_load.sum()
        psi_b = _psi_basis(z, mesh.vertices[mesh.boundary_nodes])
        g = -(self.boundary_load @ psi_b) / sz
        flags = {"near_interface": bool(near[0]), "sigma_z": float(sz), "h_loc": float(hz),
                 "flux_defect": float(np.max(np.abs(defect) / np.maximum(scale, 1e-300)))}
        if d is not None:
            d = _unit(d)
            return b @ d, float(g @ d), flags
        return b, g, flags

    def solve(self, z, d):
        b, g, flags = self.load(z, d)
        compat = b.sum()
        if abs(compat) > 1e-8 * max(np.abs(b).sum(), 1e-300):
            raise NumericError(f"regular-part load violates compatibility ({compat:.3e})")
        V = self.neumann.solve_load(b, g)
        return V, flags


def solve_regular_part(mesh: Mesh, sigma0: ConductivityField, z, d,
                       solver: Optional[RegularPartSolver] = None) -> np.ndarray:
    """Vertex values of the regular part ``V`` for source ``z`` and direction ``d``."""
    if solver is None:
        solver = RegularPartSolver(mesh, sigma0)
    V, flags = solver.solve(z, d)
    if flags["near_interface"]:
        warnings.warn(f"source point {np.asarray(z).tolist()} is within one mesh size of a conductivity interface",
                      QuadratureWarning, stacklevel=2)
    return V


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


class DipoleContext:
    """Reusable state for dipole traces on one mesh and background."""

    def __init__(self, mesh: Mesh, sigma0: ConductivityField):
        self.mesh = mesh
        self.sigma0 = sigma0
        self.regular = RegularPartSolver(mesh, sigma0)

    @cached_property
    def ntd(self):
        return ntd_continuum(self.mesh, self.sigma0)

    @cached_property
    def boundary_mass_solve(self):
        return factorized(self.mesh.facet_mass().tocsc())

    def neumann_trace(self, z, d):
        """Nodal Neumann data ``-dphi_hat/dnu`` as the L2 projection of its facet values."""
        mesh = self.mesh
        sz = self.regular.source_info(z)[1][0]
        z = np.asarray(z, dtype=float)
        raw = self.regular.boundary_flux(z)
        dpsi = raw @ d
        wq = mesh.facet_areas[:, None] * TRI_WEIGHTS[None]
        local = (wq * dpsi) @ TRI_NODES + (self.regular.flux_correction(z, raw) @ d)[:, None] / 3.0
        load = np.zeros(len(mesh.boundary_nodes))
        np.add.at(load, mesh.facets_local.ravel(), -local.ravel())
        return self.boundary_mass_solve(load) / sz


def dipole_trace(mesh: Mesh, sigma0: ConductivityField, z, d, mode: str = "exact",
                 context: Optional[DipoleContext] = None) -> DipoleTrace:
    """Zero-mean boundary trace of the dipole test function.

    ``mode`` selects ``exact`` (regular part + free-space dipole),
    ``free_space`` (free-space dipole minus its mean) or ``ntd_shortcut``
    (homogeneous background only: the continuum NtD matrix applied to the
    Neumann data of the free-space dipole).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown dipole mode {mode!r}")
    if context is None:
        context = DipoleContext(mesh, sigma0)
    z = np.asarray(z, dtype=float)
    d = _unit(d)
    reg = context.regular
    tet, sig, h, near = reg.source_info(z)
    flags = {"near_interface": bool(near[0])}
    gap = mesh.distance_to_boundary(z[None])[0]
    if gap < h[0]:
        flags["near_boundary"] = True
        warnings.warn(f"source point {z.tolist()} is closer to the boundary than the local mesh size",
                      QuadratureWarning, stacklevel=2)
    bn = mesh.boundary_nodes
    phi_hat = free_dipole(z, d, mesh.vertices[bn], sig[0])
    w = reg.boundary_load
    if mode == "exact":
        V, fl = reg.solve(z, d)
        values = V[bn] + phi_hat
    elif mode == "free_space":
        values = phi_hat - (w @ phi_hat) / w.sum()
    else:
        if not sigma0.is_homogeneous:
            raise ConfigError("ntd_shortcut mode needs a homogeneous background")
        g = context.neumann_trace(z, d)
        g -= (w @ g) / w.sum()
        values = context.ntd.apply(g) + phi_hat - (w @ phi_hat) / w.sum()
    return DipoleTrace(z, d, values, mode, flags)


# ---------------------------------------------------------------------------
# batched projections for the indicator
# ---------------------------------------------------------------------------


class DipoleProjector:
    """Electrode projections of dipole traces for many source points at once.

    For ``exact`` mode the projected regular part is evaluated through the
    adjoint solutions ``y_i = S^{-1} l_i`` of the projector rows ``l_i``: the
    projection of ``V = S^{-1}(b, g)`` is ``y_i . b + mu_i g``, identical to
    solving for ``V`` and projecting, at the cost of ``M`` solves in total.
    """

    def __init__(self, mesh: Mesh, sigma0: ConductivityField, layout: ElectrodeLayout, mode: str = "exact"):
        if mode not in MODES:
            raise ConfigError(f"unknown dipole mode {mode!r}")
        if mode == "ntd_shortcut" and not sigma0.is_homogeneous:
            raise ConfigError("ntd_shortcut mode needs a homogeneous background")
        self.mesh = mesh
        self.layout = layout
        self.mode = mode
        self.context = DipoleContext(mesh, sigma0)
        self.Pm = pm_weights(mesh, layout).toarray()  # (M, nb)

    @cached_property
    def _adjoint(self):
        mesh = self.mesh
        reg = self.context.regular
        L = np.zeros((mesh.n_vertices, self.layout.n_electrodes))
        L[mesh.boundary_nodes] = self.Pm.T
        Y = reg.neumann.solve_load(L)
        mu = reg.neumann.solver.multiplier(L)
        # boundary: values of y at facet quadrature points, (nf, q, M)
        Yq = np.einsum("qj,fjm->fqm", TRI_NODES, Y[mesh.facets])
        Ybar = Y[mesh.facets].mean(axis=1)  # (nf, M), pairs with the facet flux correction
        # volume: sum_j y_j grad w_j per tet, (nt, a, M)
        T = np.einsum("tja,tjm->tam", mesh.tet_gradients, Y[mesh.tets])
        return Yq, Ybar, T, mu

    @cached_property
    def _shortcut(self):
        ctx = self.context
        return self.Pm @ ctx.ntd.matrix  # (M, nb)

    def project(self, points, chunk: int = 16):
        """Coefficients for d = e_1, e_2, e_3; shape (n_points, 3, M), plus flags."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        reg = self.context.regular
        tet, sig, h, near = reg.source_info(points)
        out = np.empty((len(points), 3, self.layout.n_electrodes))
        for value in np.unique(sig):
            idx = np.nonzero(sig == value)[0]
            for start in range(0, len(idx), chunk):
                sl = idx[start:start + chunk]
                out[sl] = self._project_chunk(points[sl], float(value), h[sl])
        return out, {"near_interface": near, "sigma_z": sig, "h_loc": h}

    def _project_chunk(self, Z, sig, h):
        """Projections for points sharing the background value ``sig``."""
        mesh = self.mesh
        bn = mesh.boundary_nodes
        w = self.context.regular.boundary_load
        psi = _psi_basis(Z[:, None, :], mesh.vertices[bn][None])  # (P, nb, k)
        free = np.einsum("mb,pbk->pkm", self.Pm, psi) / sig
        mean = np.einsum("b,pbk->pk", w, psi) / sig
        if self.mode != "exact":
            rowsum = self.Pm @ np.ones(len(bn))
            base = free - (mean / w.sum())[:, :, None] * rowsum[None, None]
            if self.mode == "free_space":
                return base
            out = np.empty_like(base)
            for p, z in enumerate(Z):
                G = np.column_stack([self.context.neumann_trace(z, e) for e in np.eye(3)])
                G -= (w @ G) / w.sum()
                out[p] = base[p] + (self._shortcut @ G).T
            return out

        Yq, Ybar, T, mu = self._adjoint
        reg = self.context.regular
        wq = mesh.facet_areas[:, None] * TRI_WEIGHTS[None]
        out = free - mean[:, :, None] * mu[None, None, :]
        blk = reg.block(sig)
        if len(blk.index):
            T_blk = self._volume_block(sig)
            # centroid rule for all points at once, then per-point refinement near z
            r = blk.centroids[None] - Z[:, None]
            coarse = _integrated_hessian(np.zeros(3), r.reshape(-1, 1, 3), np.tile(blk.volumes, len(Z))[:, None])
            coarse = coarse.reshape(len(Z), len(blk.index), 3, 3)
            F = np.empty((len(Z), 3, 3 * len(blk.index)))
            for p, z in enumerate(Z):
                Fp = reg.volume_integrals(z, h[p], blk, coarse=coarse[p])
                F[p] = Fp.transpose(2, 0, 1).reshape(3, -1)
            out += (F.reshape(-1, F.shape[2]) @ T_blk).reshape(len(Z), 3, -1)
        for p, z in enumerate(Z):
            raw = reg.boundary_flux(z)
            dpsi = raw * wq[:, :, None]
            out[p] -= dpsi.reshape(-1, 3).T @ Yq.reshape(-1, Yq.shape[2]) + reg.flux_correction(z, raw).T @ Ybar
        return out

    def _volume_block(self, sig_z):
        """Adjoint gradients ``sum_j y_j grad w_j`` on the source cells, shape (3t, M)."""
        cache = self.__dict__.setdefault("_blocks", {})
        if sig_z not in cache:
            T = self._adjoint[2]
            idx = self.context.regular.block(sig_z).index
            cache[sig_z] = np.ascontiguousarray(T[idx].reshape(-1, T.shape[2]))
        return cache[sig_z]

    def coefficients(self, points, directions):
        """Projections for each point and each direction: (n_points, n_dirs, M)."""
        basis, flags = self.project(points)
        D = np.array([_unit(d) for d in directions])
        return np.einsum("nk,pkm->pnm", D, basis), flags
