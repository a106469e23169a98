"""Tetrahedral meshes with physical tags, electrode layouts and boundary quadrature.

Meshes are read from Gmsh MSH ASCII v2.2 files. Volume regions and surface
patches (electrodes) are Gmsh physical groups. All boundary fields in the
package are P1 fields stored on ``Mesh.boundary_nodes``.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import (
    ConfigError,
    FormatError,
    GeometryError,
    LayoutError,
    QuadratureWarning,
    TopologyError,
)

logger = logging.getLogger(__name__)

# 3-point degree-2 rule on the reference triangle (barycentric nodes, equal weights)
TRI_NODES = np.array(
    [[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]
)
TRI_WEIGHTS = np.full(3, 1 / 3)

# tet faces opposite to local vertex 0..3
_TET_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Tetrahedral volume mesh with tagged boundary facets.

    Use :meth:`from_arrays` (or :func:`load_mesh`) to build one: it checks the
    invariants, orients tets positively and boundary facets outward.
    """

    vertices: np.ndarray
    tets: np.ndarray
    tet_tags: np.ndarray
    facets: np.ndarray
    facet_tags: np.ndarray
    names: dict = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, vertices, tets, tet_tags, facets, facet_tags, names=None):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        tets = np.array(tets, dtype=np.int64).reshape(-1, 4)
        facets = np.array(facets, dtype=np.int64).reshape(-1, 3)
        tet_tags = np.asarray(tet_tags, dtype=np.int64).reshape(-1)
        facet_tags = np.asarray(facet_tags, dtype=np.int64).reshape(-1)
        nv = len(vertices)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise GeometryError("vertices must be an (n, 3) array")
        if len(tets) == 0:
            raise TopologyError("mesh has no tetrahedra")
        for name, conn in (("tetrahedron", tets), ("facet", facets)):
            bad = (conn < 0) | (conn >= nv)
            if bad.any():
                row = int(np.nonzero(bad.any(axis=1))[0][0])
                raise TopologyError(f"{name} {row} references a nonexistent vertex")

        tets = _orient_tets(vertices, tets)
        facets = _check_boundary(vertices, tets, facets)
        for a in (vertices, tets, tet_tags, facets, facet_tags):
            a.setflags(write=False)
        return cls(vertices, tets, tet_tags, facets, facet_tags, dict(names or {}))

    # ---- sizes -------------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def region_tags(self) -> set:
        return set(np.unique(self.tet_tags).tolist())

    @property
    def surface_tags(self) -> set:
        return set(np.unique(self.facet_tags).tolist())

    # ---- volume geometry ---------------------------------------------------
    @cached_property
    def tet_volumes(self) -> np.ndarray:
        return _signed_volumes(self.vertices, self.tets)

    @cached_property
    def tet_gradients(self) -> np.ndarray:
        """Gradients of the four barycentric basis functions, shape (nt, 4, 3)."""
        p = self.vertices[self.tets]
        jac = (p[:, 1:] - p[:, :1]).transpose(0, 2, 1)  # columns are edges
        inv = np.linalg.inv(jac)  # rows are grad(lambda_1..3)
        grads = np.empty((len(self.tets), 4, 3))
        grads[:, 1:] = inv
        grads[:, 0] = -inv.sum(axis=1)
        return grads

    @cached_property
    def tet_centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    @cached_property
    def tet_sizes(self) -> np.ndarray:
        """Longest edge of each tet (the local mesh size)."""
        p = self.vertices[self.tets]
        i, j = np.triu_indices(4, 1)
        return np.linalg.norm(p[:, i] - p[:, j], axis=2).max(axis=1)

    @cached_property
    def diameter(self) -> float:
        """Largest distance between two boundary vertices."""
        pts = self.vertices[self.boundary_nodes]
        from scipy.spatial import ConvexHull

        hull = pts[ConvexHull(pts).vertices]
        best = 0.0
        for start in range(0, len(hull), 512):
            d = np.linalg.norm(hull[start : start + 512, None] - hull[None], axis=2)
            best = max(best, float(d.max()))
        return best

    @property
    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    # ---- boundary geometry -------------------------------------------------
    @cached_property
    def facet_areas(self) -> np.ndarray:
        p = self.vertices[self.facets]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    @cached_property
    def facet_normals(self) -> np.ndarray:
        p = self.vertices[self.facets]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def facet_centroids(self) -> np.ndarray:
        return self.vertices[self.facets].mean(axis=1)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.facets)

    @cached_property
    def facets_local(self) -> np.ndarray:
        """Facet connectivity in boundary-node numbering."""
        return np.searchsorted(self.boundary_nodes, self.facets)

    @property
    def boundary_area(self) -> float:
        return float(self.facet_areas.sum())

    @cached_property
    def quadrature_points(self) -> np.ndarray:
        """Quadrature nodes of every boundary facet, shape (nf, 3, 3)."""
        return np.einsum("qk,fkd->fqd", TRI_NODES, self.vertices[self.facets])

    def facet_mass(self, facet_ids=None) -> sparse.csr_matrix:
        """P1 mass matrix of a facet subset in boundary-node numbering."""
        if facet_ids is None:
            facet_ids = np.arange(len(self.facets))
        facet_ids = np.asarray(facet_ids, dtype=np.int64)
        loc = self.facets_local[facet_ids]
        area = self.facet_areas[facet_ids]
        local = (np.full((3, 3), 1.0) + np.eye(3)) / 12.0
        data = area[:, None, None] * local[None]
        rows = np.repeat(loc, 3, axis=1)
        cols = np.tile(loc, (1, 3))
        nb = len(self.boundary_nodes)
        return sparse.csr_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=(nb, nb))

    def facet_load(self, facet_ids=None) -> np.ndarray:
        """Integrals of the boundary hat functions over a facet subset."""
        if facet_ids is None:
            facet_ids = np.arange(len(self.facets))
        facet_ids = np.asarray(facet_ids, dtype=np.int64)
        out = np.zeros(len(self.boundary_nodes))
        np.add.at(out, self.facets_local[facet_ids].ravel(), np.repeat(self.facet_areas[facet_ids] / 3, 3))
        return out

    def facets_with_tag(self, tag: int) -> np.ndarray:
        return np.nonzero(self.facet_tags == tag)[0]

    # ---- point queries -----------------------------------------------------
    @cached_property
    def _centroid_tree(self):
        return cKDTree(self.tet_centroids)

    def locate(self, points, tol: float = 1e-10):
        """Containing tet (or -1) and barycentric coordinates for each point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        found = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 4))
        # a point inside tet t lies within the longest edge of t from its centroid
        dist, _ = self._centroid_tree.query(points)
        todo = np.nonzero(dist <= self.tet_sizes.max() * (1 + 1e-9))[0]
        k = 16
        while len(todo) and k <= 4 * 1024:
            k_eff = min(k, self.n_tets)
            missed = []
            for start in range(0, len(todo), max(1, (1 << 18) // k_eff)):
                chunk = todo[start:start + max(1, (1 << 18) // k_eff)]
                _, cand = self._centroid_tree.query(points[chunk], k=k_eff)
                cand = cand.reshape(len(chunk), -1)
                lam = self._barycentric(points[chunk, None, :], cand)
                ok = lam.min(axis=2) >= -tol
                hit = ok.any(axis=1)
                first = ok.argmax(axis=1)
                rows = np.nonzero(hit)[0]
                found[chunk[rows]] = cand[rows, first[rows]]
                bary[chunk[rows]] = lam[rows, first[rows]]
                missed.append(chunk[~hit])
            # points far outside never get a hit; stop once the search covers the mesh
            if k_eff == self.n_tets:
                break
            todo = np.concatenate(missed)
            k *= 4
        return found, bary

    def _barycentric(self, pts, cand):
        v0 = self.vertices[self.tets[cand, 0]]
        grads = self.tet_gradients[cand]  # (..., 4, 3)
        rel = pts - v0
        lam = np.einsum("...kd,...d->...k", grads[..., 1:, :], rel)
        return np.concatenate([1 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)

    def region_at(self, points) -> np.ndarray:
        tet, _ = self.locate(points)
        tags = np.full(len(tet), -1, dtype=np.int64)
        tags[tet >= 0] = self.tet_tags[tet[tet >= 0]]
        return tags

    @cached_property
    def _facet_tree(self):
        return cKDTree(self.facet_centroids)

    def distance_to_boundary(self, points, k: int = 12) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        k = min(k, len(self.facets))
        _, cand = self._facet_tree.query(points, k=k)
        cand = cand.reshape(len(points), -1)
        tri = self.vertices[self.facets[cand]]
        d = _point_triangle_distance(points[:, None, :], tri[:, :, 0], tri[:, :, 1], tri[:, :, 2])
        return d.min(axis=1)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.vertices, self.tets, self.tet_tags, self.facets, self.facet_tags):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def transformed(self, func: Callable[[np.ndarray], np.ndarray]) -> "Mesh":
        """Same connectivity with vertices mapped through ``func``."""
        return Mesh.from_arrays(func(np.array(self.vertices)), self.tets, self.tet_tags,
                                self.facets, self.facet_tags, self.names)


def _signed_volumes(vertices, tets):
    p = vertices[tets]
    a, b, c = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def _orient_tets(vertices, tets):
    vol = _signed_volumes(vertices, tets)
    span = np.ptp(vertices, axis=0).max() if len(vertices) else 1.0
    degenerate = np.abs(vol) <= 1e-13 * span**3
    if degenerate.any():
        raise GeometryError(f"tetrahedron {int(np.nonzero(degenerate)[0][0])} has zero volume")
    tets = tets.copy()
    neg = vol < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3], tets[neg, 2].copy()
    return tets


def _check_boundary(vertices, tets, facets):
    """Check the facet set against the tet faces; return outward-oriented facets."""
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    owner = np.repeat(np.arange(len(tets)), 4)
    opposite = tets.reshape(-1)
    key = np.sort(faces, axis=1)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    if (counts > 2).any():
        raise TopologyError("a triangle is shared by more than two tetrahedra")
    n_free = int((counts == 1).sum())

    fkey = np.sort(facets, axis=1)
    idx = _row_lookup(uniq, fkey)
    if (idx < 0).any():
        raise TopologyError(f"boundary facet {int(np.nonzero(idx < 0)[0][0])} is not a tetrahedron face")
    if (counts[idx] != 1).any():
        raise TopologyError(f"boundary facet {int(np.nonzero(counts[idx] != 1)[0][0])} is an interior face")
    if len(np.unique(idx)) != len(idx):
        raise TopologyError("boundary facet listed twice")
    if len(idx) != n_free:
        raise TopologyError(f"boundary is not closed: {n_free - len(idx)} exterior tet faces carry no surface tag")

    # each boundary edge shared by exactly two facets
    edges = np.sort(facets[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
    _, ecount = np.unique(edges, axis=0, return_counts=True)
    if (ecount != 2).any():
        raise TopologyError("boundary surface is not closed (edge not shared by exactly two facets)")

    # outward orientation against the opposite vertex of the owning tet
    face_of = np.full(len(uniq), -1, dtype=np.int64)
    face_of[inv] = np.arange(len(inv))
    slot = face_of[idx]
    far = vertices[opposite[slot]]
    p = vertices[facets]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    inward = np.einsum("ij,ij->i", n, far - p[:, 0]) > 0
    facets = facets.copy()
    facets[inward, 1], facets[inward, 2] = facets[inward, 2], facets[inward, 1].copy()
    return facets


def _row_lookup(table, rows):
    """Index of each row of ``rows`` in the lexicographically sorted ``table`` (-1 if absent)."""
    base = max(int(table.max(initial=0)), int(rows.max(initial=0))) + 1
    tk = (table[:, 0] * base + table[:, 1]) * base + table[:, 2]
    rk = (rows[:, 0] * base + rows[:, 1]) * base + rows[:, 2]
    pos = np.searchsorted(tk, rk)
    pos = np.clip(pos, 0, len(tk) - 1)
    return np.where(tk[pos] == rk, pos, -1)


def _point_triangle_distance(p, a, b, c):
    """Vectorised closest-point distance from points to triangles (Ericson)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        closest = a + ab * v[..., None] + ac * w[..., None]
        # edge regions
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    e_ab = a + ab * t_ab[..., None]
    e_ac = a + ac * t_ac[..., None]
    e_bc = b + (c - b) * t_bc[..., None]
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (d6 >= 0) & (d5 <= d6),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    choices = [a, b, c, e_ab, e_ac, e_bc]
    out = closest
    for cond, ch in zip(reversed(conds), reversed(choices)):
        out = np.where(cond[..., None], ch, out)
    return np.linalg.norm(p - out, axis=-1)


# ---------------------------------------------------------------------------
# Gmsh MSH ASCII v2.2
# ---------------------------------------------------------------------------

_NODES_PER_TYPE = {1: 2, 2: 3, 3: 4, 4: 4, 5: 8, 6: 6, 7: 5, 15: 1}


def load_mesh(path: Union[str, Path]) -> Mesh:
    """Read a Gmsh MSH ASCII v2.2 file.

    Triangles (type 2) become boundary facets tagged by their physical group,
    tetrahedra (type 4) become volume elements tagged by theirs. Other element
    types are skipped.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"mesh file not found: {path}")
    lines = path.read_text().splitlines()
    pos = 0
    names = {}
    node_ids = coords = None
    tris, tri_tags, tets, tet_tags = [], [], [], []

    def expect(token):
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines) or lines[pos].strip() != token:
            raise FormatError(f"expected {token}", pos + 1)
        pos += 1

    def count_line():
        nonlocal pos
        try:
            n = int(lines[pos].strip())
        except (IndexError, ValueError):
            raise FormatError("expected an integer count", pos + 1) from None
        pos += 1
        return n

    saw_format = False
    while pos < len(lines):
        head = lines[pos].strip()
        if not head:
            pos += 1
            continue
        if head == "$MeshFormat":
            pos += 1
            parts = lines[pos].split() if pos < len(lines) else []
            if len(parts) < 3 or not parts[0].startswith("2."):
                raise FormatError("only MSH ASCII version 2.2 is supported", pos + 1)
            if parts[1] != "0":
                raise FormatError("binary MSH files are not supported", pos + 1)
            pos += 1
            expect("$EndMeshFormat")
            saw_format = True
        elif head == "$PhysicalNames":
            pos += 1
            for _ in range(count_line()):
                parts = lines[pos].split(maxsplit=2) if pos < len(lines) else []
                if len(parts) != 3:
                    raise FormatError("malformed physical name", pos + 1)
                try:
                    names[int(parts[1])] = parts[2].strip().strip('"')
                except ValueError:
                    raise FormatError("malformed physical name", pos + 1) from None
                pos += 1
            expect("$EndPhysicalNames")
        elif head == "$Nodes":
            pos += 1
            n = count_line()
            start = pos
            block = lines[start : start + n]
            try:
                arr = np.array([ln.split() for ln in block], dtype=float)
                if arr.shape != (n, 4):
                    raise ValueError
            except ValueError:
                for k, ln in enumerate(block):
                    parts = ln.split()
                    try:
                        if len(parts) != 4:
                            raise ValueError
                        [float(x) for x in parts]
                    except ValueError:
                        raise FormatError("malformed node line", start + k + 1) from None
                raise FormatError("node section ended early", start + len(block) + 1) from None
            node_ids = arr[:, 0].astype(np.int64)
            coords = arr[:, 1:]
            pos = start + n
            expect("$EndNodes")
        elif head == "$Elements":
            pos += 1
            n = count_line()
            for k in range(n):
                if pos >= len(lines):
                    raise FormatError("element section ended early", pos + 1)
                try:
                    parts = [int(x) for x in lines[pos].split()]
                    etype, ntag = parts[1], parts[2]
                    tags = parts[3 : 3 + ntag]
                    conn = parts[3 + ntag :]
                    if etype in _NODES_PER_TYPE and len(conn) != _NODES_PER_TYPE[etype]:
                        raise ValueError
                except (ValueError, IndexError):
                    raise FormatError("malformed element line", pos + 1) from None
                phys = tags[0] if tags else 0
                if etype == 2:
                    tris.append(conn)
                    tri_tags.append(phys)
                elif etype == 4:
                    tets.append(conn)
                    tet_tags.append(phys)
                pos += 1
            expect("$EndElements")
        elif head.startswith("$"):
            # unknown section: skip to its end marker
            end = "$End" + head[1:]
            pos += 1
            while pos < len(lines) and lines[pos].strip() != end:
                pos += 1
            pos += 1
        else:
            raise FormatError(f"unexpected content {head[:30]!r}", pos + 1)

    if not saw_format:
        raise FormatError("missing $MeshFormat section", 1)
    if node_ids is None:
        raise FormatError("missing $Nodes section", len(lines))

    index = {int(i): k for k, i in enumerate(node_ids)}

    def remap(conn, what):
        out = np.empty((len(conn), len(conn[0]) if conn else 0), dtype=np.int64)
        for r, row in enumerate(conn):
            try:
                out[r] = [index[i] for i in row]
            except KeyError as exc:
                raise TopologyError(f"{what} {r} references nonexistent vertex {exc.args[0]}") from None
        return out

    tet_arr = remap(tets, "tetrahedron") if tets else np.empty((0, 4), dtype=np.int64)
    tri_arr = remap(tris, "triangle") if tris else np.empty((0, 3), dtype=np.int64)
    mesh = Mesh.from_arrays(coords, tet_arr, tet_tags, tri_arr, tri_tags, names)
    logger.info("loaded %s: %d vertices, %d tets, %d boundary facets",
                path.name, mesh.n_vertices, mesh.n_tets, len(mesh.facets))
    return mesh


def write_mesh(mesh: Mesh, path: Union[str, Path], names: dict = None) -> None:
    """Write ``mesh`` as Gmsh MSH ASCII v2.2 (1-based ids, physical = elementary tag)."""
    names = dict(mesh.names if names is None else names)
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat"]
    if names:
        out += ["$PhysicalNames", str(len(names))]
        vol = set(mesh.region_tags)
        for tag in sorted(names):
            dim = 3 if tag in vol else 2
            out.append(f'{dim} {tag} "{names[tag]}"')
        out.append("$EndPhysicalNames")
    nv = mesh.n_vertices
    out += ["$Nodes", str(nv)]
    ids = np.arange(1, nv + 1)
    out += [f"{i} {x!r} {y!r} {z!r}" for i, (x, y, z) in zip(ids, mesh.vertices.tolist())]
    out += ["$EndNodes", "$Elements", str(len(mesh.facets) + mesh.n_tets)]
    k = 1
    for tag, (a, b, c) in zip(mesh.facet_tags.tolist(), (mesh.facets + 1).tolist()):
        out.append(f"{k} 2 2 {tag} {tag} {a} {b} {c}")
        k += 1
    for tag, (a, b, c, d) in zip(mesh.tet_tags.tolist(), (mesh.tets + 1).tolist()):
        out.append(f"{k} 4 2 {tag} {tag} {a} {b} {c} {d}")
        k += 1
    out.append("$EndElements")
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Electrode layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ElectrodeLayout:
    """Electrodes as unions of boundary facets plus the gap between them."""

    tags: tuple
    electrodes: tuple  # one int array of facet ids per electrode
    areas: np.ndarray
    gap_facets: np.ndarray
    gamma_area: float
    contact_impedance: np.ndarray

    @property
    def n_electrodes(self) -> int:
        return len(self.electrodes)

    @property
    def gap_area(self) -> float:
        return self.gamma_area - float(self.areas.sum())

    def fingerprint(self) -> str:
        """Mesh-independent identity: electrode tags and contact impedances."""
        h = hashlib.sha256(repr((tuple(int(t) for t in self.tags),
                                 tuple(np.round(self.contact_impedance, 12).tolist()))).encode())
        return h.hexdigest()[:16]

    def centers(self, mesh: Mesh) -> np.ndarray:
        """Area-weighted centroid of each electrode."""
        out = np.empty((self.n_electrodes, 3))
        for i, f in enumerate(self.electrodes):
            w = mesh.facet_areas[f]
            out[i] = (mesh.facet_centroids[f] * w[:, None]).sum(axis=0) / w.sum()
        return out


def build_layout(mesh: Mesh, electrode_tags: Sequence[int], z=5.0) -> ElectrodeLayout:
    """Collect the facets of each electrode tag; the rest of the boundary is the gap."""
    tags = tuple(int(t) for t in electrode_tags)
    m = len(tags)
    if m < 2:
        raise LayoutError("at least two electrodes are needed for a balanced current")
    if len(set(tags)) != m:
        raise LayoutError("electrode tags must be pairwise distinct")
    missing = [t for t in tags if t not in mesh.surface_tags]
    if missing:
        raise ConfigError(f"electrode tags not present in mesh: {missing}")
    z = np.broadcast_to(np.asarray(z, dtype=float), (m,)).copy()
    if not np.all(np.isfinite(z)) or (z <= 0).any():
        raise ConfigError("contact impedance must be strictly positive")

    electrodes = tuple(mesh.facets_with_tag(t) for t in tags)
    for t, f in zip(tags, electrodes):
        if not _edge_connected(mesh.facets[f]):
            raise LayoutError(f"electrode {t} is not edge-connected")
    used = np.concatenate(electrodes)
    gap = np.setdiff1d(np.arange(len(mesh.facets)), used)
    areas = np.array([mesh.facet_areas[f].sum() for f in electrodes])
    z.setflags(write=False)
    areas.setflags(write=False)
    return ElectrodeLayout(tags, electrodes, areas, gap, mesh.boundary_area, z)


def _edge_connected(tris: np.ndarray) -> bool:
    if len(tris) <= 1:
        return True
    edges = np.sort(tris[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
    owner = np.repeat(np.arange(len(tris)), 3)
    _, inv = np.unique(edges, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    order = np.argsort(inv, kind="stable")
    s_inv, s_own = inv[order], owner[order]
    same = s_inv[1:] == s_inv[:-1]
    a, b = s_own[:-1][same], s_own[1:][same]
    g = sparse.coo_matrix((np.ones(len(a)), (a, b)), shape=(len(tris), len(tris)))
    n, _ = connected_components(g, directed=False)
    return n == 1


# ---------------------------------------------------------------------------
# Boundary quadrature
# ---------------------------------------------------------------------------

BoundaryField = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


def surface_quadrature(mesh: Mesh, facet_set, f: BoundaryField) -> float:
    """Integrate ``f`` over a set of boundary facets with the 3-point rule.

    ``f`` is either a callable taking an (n, 3) array of points, or a P1 field
    given by its values on ``mesh.boundary_nodes``.
    """
    facet_set = np.asarray(facet_set, dtype=np.int64).reshape(-1)
    if len(facet_set) == 0:
        warnings.warn("surface_quadrature over an empty facet set", QuadratureWarning, stacklevel=2)
        return 0.0
    if callable(f):
        pts = mesh.quadrature_points[facet_set].reshape(-1, 3)
        vals = np.asarray(f(pts), dtype=float).reshape(len(facet_set), 3)
    else:
        nodal = np.asarray(f, dtype=float)
        if nodal.shape != (len(mesh.boundary_nodes),):
            raise ValueError("boundary field must have one value per boundary node")
        vals = nodal[mesh.facets_local[facet_set]] @ TRI_NODES.T
    return float(mesh.facet_areas[facet_set] @ (vals @ TRI_WEIGHTS))
