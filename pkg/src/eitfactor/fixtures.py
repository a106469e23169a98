"""Synthetic fixture meshes and the experiment configuration suite.

Two geometry families are generated deterministically:

* a cylinder (radius 10, height 7) with one or two rings of rectangular
  electrodes, built by extruding a graded disk triangulation;
* a three-layer "head" ellipsoid (skin / skull / brain) with 31 disk
  electrodes on its upper part, built by mapping a tensor grid of the cube
  onto the ball.

Each fixture comes as a fine data mesh and a coarser reconstruction mesh so
that simulation and inversion never share a discretisation.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

from .mesh import Mesh, write_mesh

logger = logging.getLogger(__name__)

GAP_TAG = 10
ELECTRODE_TAG0 = 101

CYLINDER_RADIUS = 10.0
CYLINDER_HEIGHT = 7.0

HEAD_AXES = (75.0, 95.0, 85.0)
# outer radius (in the unit ball) of brain and skull; skin reaches 1
HEAD_LAYERS = (0.88, 0.94)
HEAD_REGIONS = {"brain": 3, "skull": 2, "skin": 1}
HEAD_SIGMA = {1: 1.5e-4, 2: 2.0e-5, 3: 4.4e-4}
HEAD_ELECTRODE_RADIUS = 9.0


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def exterior_faces(tets: np.ndarray) -> np.ndarray:
    faces = tets[:, [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return faces[counts[inv.reshape(-1)] == 1]


def _split_prisms(tris: np.ndarray, n_layers: int, n2d: int) -> np.ndarray:
    """Three tets per prism; quad-face diagonals follow global vertex order so neighbours conform."""
    t = np.sort(tris, axis=1)
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    out = []
    for k in range(n_layers):
        lo, hi = k * n2d, (k + 1) * n2d
        A, B, C = a + lo, b + lo, c + lo
        A2, B2, C2 = a + hi, b + hi, c + hi
        out += [np.stack(x, axis=1) for x in ((A, B, C, C2), (A, B, B2, C2), (A, A2, B2, C2))]
    return np.concatenate(out)


def _disk_points(radius, n_boundary, h_boundary, h_max, growth=1.25, offset=0.0):
    """Concentric rings: ``n_boundary`` nodes on the rim, spacing growing inwards."""
    theta = 2 * np.pi * (np.arange(n_boundary) + offset) / n_boundary
    pts = [radius * np.column_stack([np.cos(theta), np.sin(theta)])]
    r, h, ring = radius, h_boundary, 0
    while True:
        r -= h
        h = min(h * growth, h_max)
        ring += 1
        if r < 0.6 * h:
            break
        n = max(int(round(2 * np.pi * r / h)), 6)
        th = 2 * np.pi * (np.arange(n) + 0.5 * (ring % 2)) / n + 0.37 * ring
        pts.append(r * np.column_stack([np.cos(th), np.sin(th)]))
    pts.append(np.zeros((1, 2)))
    return np.concatenate(pts)


# ---------------------------------------------------------------------------
# cylinder
# ---------------------------------------------------------------------------


def cylinder_mesh(rings, per_pitch, dz, electrode_height=1.0, h_max=1.2,
                  radius=CYLINDER_RADIUS, height=CYLINDER_HEIGHT):
    """Cylinder ``x^2 + y^2 <= radius^2, 0 <= z <= height`` with electrode rings.

    Parameters
    ----------
    rings : list of (n_electrodes, z_center)
        All rings must have the same electrode count.
    per_pitch : int
        Boundary nodes per electrode pitch (even); electrodes span half a pitch.
    dz : float
        Layer thickness; electrode top and bottom must fall on layers.

    Returns
    -------
    Mesh
        Volume tag 1, gap tag 10, electrodes tagged 101, 102, ... ring by ring.
    """
    counts = {m for m, _ in rings}
    if len(counts) != 1:
        raise ValueError("all rings must carry the same number of electrodes")
    m = counts.pop()
    if per_pitch % 2:
        raise ValueError("per_pitch must be even")
    nb = m * per_pitch
    width = per_pitch // 2
    h_b = 2 * np.pi * radius / nb
    pts2 = _disk_points(radius, nb, h_b, h_max, offset=-width / 2)
    tris = Delaunay(pts2).simplices
    n_layers = int(round(height / dz))
    zs = np.linspace(0.0, height, n_layers + 1)
    n2d = len(pts2)
    verts = np.column_stack([np.tile(pts2, (n_layers + 1, 1)), np.repeat(zs, n2d)])
    tets = _split_prisms(tris, n_layers, n2d)

    faces = exterior_faces(tets)
    cen = verts[faces].mean(axis=1)
    tags = np.full(len(faces), GAP_TAG)
    side = np.abs(np.hypot(cen[:, 0], cen[:, 1])) > radius * np.cos(np.pi / nb) - 1e-9
    side &= np.abs(cen[:, 2] - 0) > 1e-9
    side &= np.abs(cen[:, 2] - height) > 1e-9
    ang = np.mod(np.arctan2(cen[:, 1], cen[:, 0]), 2 * np.pi)
    half = np.pi * width / nb
    names = {1: "domain", GAP_TAG: "gap"}
    tag = ELECTRODE_TAG0
    for r, (_, zc) in enumerate(rings):
        inz = np.abs(cen[:, 2] - zc) < electrode_height / 2
        for i in range(m):
            ac = 2 * np.pi * i / m
            d = np.abs(np.angle(np.exp(1j * (ang - ac))))
            sel = side & inz & (d < half)
            tags[sel] = tag
            names[tag] = f"E{r}_{i}"
            tag += 1
    return Mesh.from_arrays(verts, tets, np.ones(len(tets), dtype=int), faces, tags, names)


# ---------------------------------------------------------------------------
# head
# ---------------------------------------------------------------------------


def _cube_to_ball(p):
    """Map the cube [-1, 1]^3 onto the unit ball shell by shell (max-norm -> radius)."""
    r = np.abs(p).max(axis=1)
    q = np.zeros_like(p)
    nz = r > 0
    q[nz] = p[nz] / r[nz, None]
    x, y, z = q.T
    s = np.column_stack([
        x * np.sqrt(np.clip(1 - y**2 / 2 - z**2 / 2 + y**2 * z**2 / 3, 0, None)),
        y * np.sqrt(np.clip(1 - z**2 / 2 - x**2 / 2 + z**2 * x**2 / 3, 0, None)),
        z * np.sqrt(np.clip(1 - x**2 / 2 - y**2 / 2 + x**2 * y**2 / 3, 0, None)),
    ])
    return s * r[:, None]


def head_electrode_centers(axes=HEAD_AXES):
    """31 electrodes: vertex, then rings of 8, 10 and 12 at growing polar angle."""
    dirs = [(0.0, 0.0)]
    for polar, n, shift in ((35.0, 8, 0.0), (65.0, 10, 0.5), (95.0, 12, 0.0)):
        for k in range(n):
            dirs.append((np.radians(polar), 2 * np.pi * (k + shift) / n))
    th, ph = np.array(dirs).T
    unit = np.column_stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
    return unit * np.asarray(axes)


def head_mesh(n_inner, axes=HEAD_AXES, layers=HEAD_LAYERS, electrode_radius=HEAD_ELECTRODE_RADIUS):
    """Three-layer ellipsoidal head.

    ``n_inner`` cells span the brain along each axis; skull and skin are one
    cell thick each. Regions: skin 1, skull 2, brain 3. Electrodes are the
    boundary facets whose centroid lies within ``electrode_radius`` of one of
    :func:`head_electrode_centers`.
    """
    r1, r2 = layers
    inner = np.linspace(-r1, r1, n_inner + 1)
    t = np.concatenate([[-1.0, -r2], inner, [r2, 1.0]])
    n = len(t)
    X, Y, Z = np.meshgrid(t, t, t, indexing="ij")
    cube = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    idx = np.arange(n**3).reshape(n, n, n)
    c = [idx[i : n - 1 + i, j : n - 1 + j, k : n - 1 + k].ravel()
         for i, j, k in np.ndindex(2, 2, 2)]
    # corners c[ijk] with bit order (i, j, k); Kuhn split along the 000-111 diagonal
    v = {(i, j, k): c[4 * i + 2 * j + k] for i, j, k in np.ndindex(2, 2, 2)}
    paths = [((1, 0, 0), (1, 1, 0)), ((1, 0, 0), (1, 0, 1)), ((0, 1, 0), (1, 1, 0)),
             ((0, 1, 0), (0, 1, 1)), ((0, 0, 1), (1, 0, 1)), ((0, 0, 1), (0, 1, 1))]
    tets = np.concatenate([
        np.stack([v[(0, 0, 0)], v[a], v[b], v[(1, 1, 1)]], axis=1) for a, b in paths
    ])
    cen = cube[tets].mean(axis=1)
    rad = np.abs(cen).max(axis=1)
    tet_tags = np.where(rad < r1, HEAD_REGIONS["brain"],
                        np.where(rad < r2, HEAD_REGIONS["skull"], HEAD_REGIONS["skin"]))
    verts = _cube_to_ball(cube) * np.asarray(axes)

    faces = exterior_faces(tets)
    fc = verts[faces].mean(axis=1)
    centers = head_electrode_centers(axes)
    d = np.linalg.norm(fc[:, None, :] - centers[None], axis=2)
    nearest = d.argmin(axis=1)
    tags = np.where(d.min(axis=1) < electrode_radius, ELECTRODE_TAG0 + nearest, GAP_TAG)
    names = {1: "skin", 2: "skull", 3: "brain", GAP_TAG: "gap"}
    names.update({ELECTRODE_TAG0 + i: f"E{i}" for i in range(len(centers))})
    return Mesh.from_arrays(verts, tets, tet_tags, faces, tags, names)


# ---------------------------------------------------------------------------
# experiment suite
# ---------------------------------------------------------------------------

# anisotropic scaling of the perturbed head: mean boundary distance ~7% and
# mean electrode displacement ~11% of the diameter
SHAPE_SCALING = (1.2713349, 1.0 - 0.2086249, 1.2713349)

CYL_RINGS_1 = [(32, 3.5)]
CYL_RINGS_2 = [(20, 2.0), (20, 5.0)]

MESHES = {
    "cyl1_data": lambda: cylinder_mesh(CYL_RINGS_1, 6, 0.25, h_max=0.8),
    "cyl1_recon": lambda: cylinder_mesh(CYL_RINGS_1, 4, 0.5, h_max=1.0),
    "cyl2_data": lambda: cylinder_mesh(CYL_RINGS_2, 8, 0.25, h_max=0.8),
    "cyl2_recon": lambda: cylinder_mesh(CYL_RINGS_2, 4, 0.5, h_max=1.0),
    "head_data": lambda: head_mesh(26),
    "head_recon": lambda: head_mesh(18),
    "head_shape_data": lambda: head_mesh(26).transformed(lambda x: x * np.asarray(SHAPE_SCALING)),
}


def _cyl(name, mesh_key, rings, centers, **extra):
    tags = list(range(ELECTRODE_TAG0, ELECTRODE_TAG0 + sum(m for m, _ in rings)))
    per = rings[0][0]
    pats = {"kind": "opposite_ring"} if len(rings) == 1 else {
        "kind": "opposite_per_ring", "rings": [list(range(r * per, (r + 1) * per)) for r in range(len(rings))]}
    cfg = {
        "name": name,
        "data_mesh": f"meshes/{mesh_key}_data.msh",
        "recon_mesh": f"meshes/{mesh_key}_recon.msh",
        "electrode_tags": tags,
        "contact_impedance": 5.0,
        "background": {"1": 1.0},
        "inclusions": [{"center": list(c), "radius": 1.0, "value": 2.0} for c in centers],
        "patterns": pats,
        "noise": {"delta": 0.01, "seed": 1},
        "mode": "exact",
        "grid": {"shape": [32, 32, 32]},
        "iso_level": 0.9,
    }
    cfg.update(extra)
    return cfg


def _head(name, center, layered, data="head_data", **extra):
    bg = {str(k): v for k, v in HEAD_SIGMA.items()} if layered else {"1": 1.0, "2": 1.0, "3": 1.0}
    cfg = {
        "name": name,
        "data_mesh": f"meshes/{data}.msh",
        "recon_mesh": "meshes/head_recon.msh",
        "electrode_tags": list(range(ELECTRODE_TAG0, ELECTRODE_TAG0 + 31)),
        "contact_impedance": 5.0,
        "background": bg,
        "inclusions": [{"center": list(center), "radius": 10.0,
                        "value": 2 * HEAD_SIGMA[HEAD_REGIONS["brain"]] if layered else 2.0}],
        "patterns": {"kind": "farthest_pairs", "n": 20},
        "noise": {"delta": 0.01, "seed": 1},
        "mode": "exact",
        "grid": {"shape": [32, 32, 32]},
        "iso_level": 0.9,
    }
    cfg.update(extra)
    return cfg


def suite_configs() -> dict:
    """Named experiment configurations (paths relative to the suite directory)."""
    back = (40.0, 40.0, 0.0)
    center = (0.0, 0.0, 0.0)
    cfgs = [
        _cyl("cyl_1ring", "cyl1", CYL_RINGS_1, [(0, 5, 2)]),
        _cyl("cyl_2ring", "cyl2", CYL_RINGS_2, [(0, 5, 2)]),
        _cyl("cyl_2ring_two", "cyl2", CYL_RINGS_2, [(0, 5, 2), (5, -2, 2)]),
        _head("head_homog_center", center, False),
        _head("head_homog_back", back, False),
        _head("head_layered_center", center, True),
        _head("head_layered_back", back, True),
        _head("head_perturbed_shape", center, False, data="head_shape_data"),
        _head("head_perturbed_sigma", back, True, gamma=0.1, sweep={"gamma": [0.1, 0.2, 0.5]}),
        _head("head_layered_center_noise", center, True, sweep={"delta": [0.01, 0.03, 0.07, 0.10]}),
    ]
    return {c["name"]: c for c in cfgs}


def write_suite(directory, names=None, overwrite: bool = False) -> dict:
    """Write fixture meshes and configs below ``directory``; returns config paths.

    Existing mesh files are kept unless ``overwrite`` is set.
    """
    directory = Path(directory)
    (directory / "meshes").mkdir(parents=True, exist_ok=True)
    cfgs = suite_configs()
    if names is not None:
        cfgs = {k: cfgs[k] for k in names}
    needed = set()
    for c in cfgs.values():
        for key in ("data_mesh", "recon_mesh"):
            needed.add(Path(c[key]).stem)
    for key in sorted(needed):
        path = directory / "meshes" / f"{key}.msh"
        if path.is_file() and not overwrite:
            continue
        logger.info("building fixture mesh %s", key)
        tmp = path.with_suffix(".tmp")
        write_mesh(MESHES[key](), tmp)
        tmp.replace(path)
    out = {}
    for name, c in cfgs.items():
        p = directory / f"{name}.json"
        p.write_text(json.dumps(c, indent=2) + "\n")
        out[name] = p
    return out


def main(argv=None) -> int:
    import argparse

    p = argparse.ArgumentParser(description="write the fixture meshes and experiment configs")
    p.add_argument("directory", type=Path)
    p.add_argument("--only", nargs="*", help="config names to write")
    p.add_argument("--overwrite", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    for name, path in write_suite(args.directory, args.only, args.overwrite).items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
