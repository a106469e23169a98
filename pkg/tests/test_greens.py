import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eitfactor.errors import CompatibilityError, ConfigError, GeometryError, QuadratureWarning
from eitfactor.fem import ConductivityField
from eitfactor.fixtures import HEAD_SIGMA, cylinder_mesh
from eitfactor.greens import (
    FOUR_PI,
    DipoleContext,
    DipoleProjector,
    DipoleTrace,
    RegularPartSolver,
    _exact_tet_integrals,
    _facet_flux,
    _single_layer_gradient,
    dipole_trace,
    free_dipole,
    pm_weights,
    project_pm,
    solve_regular_part,
)
from eitfactor.mesh import build_layout


def _phi(z, x, sigma):
    return 1.0 / (FOUR_PI * sigma * np.linalg.norm(x - z))


def fd_dipole(z, d, x, sigma):
    """Central difference of the fundamental solution in z along d."""
    h = 1e-5 * np.linalg.norm(x - z)
    return (_phi(z + h * d, x, sigma) - _phi(z - h * d, x, sigma)) / (2 * h)


def test_free_dipole_closed_form():
    val = free_dipole(np.zeros(3), np.array([0.0, 0, 1]), np.array([0.0, 0, 2]))
    assert val == pytest.approx(1 / (16 * np.pi), rel=1e-15)
    assert free_dipole(np.zeros(3), np.array([1.0, 0, 0]), np.array([0.0, 0, 2])) == 0.0
    with pytest.raises(GeometryError):
        free_dipole(np.ones(3), np.array([1.0, 0, 0]), np.ones(3))


def test_free_dipole_matches_finite_differences():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        z, x = rng.uniform(-5, 5, (2, 3))
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        sigma = rng.uniform(0.1, 3.0)
        ref = fd_dipole(z, d, x, sigma)
        val = free_dipole(z, d, x, sigma)
        worst = max(worst, abs(val - ref) / np.abs(_grad_norm(z, x, sigma)))
    assert worst <= 1e-6


def _grad_norm(z, x, sigma):
    return 1.0 / (FOUR_PI * sigma * np.linalg.norm(x - z) ** 2)


def test_single_layer_gradient_against_finite_differences():
    rng = np.random.default_rng(1)
    tri = rng.normal(size=(1, 3, 3))
    # oracle: fine quadrature of the single layer, differentiated numerically
    pts, w = _triangle_rule(tri[0], 7)

    def S(z):
        return w @ (1.0 / np.linalg.norm(pts - z, axis=1))

    for z in rng.normal(size=(5, 3)) * 3 + np.array([0, 0, 2.0]):
        h = 1e-4
        fd = np.array([(S(z + h * e) - S(z - h * e)) / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(_single_layer_gradient(z, tri)[0], fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max())


def _triangle_rule(tri, levels):
    tris = tri[None]
    for _ in range(levels):
        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        tris = np.concatenate([np.stack(t, axis=1) for t in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))])
    area = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    # 3-point edge-midpoint rule on each child (degree 2)
    mids = np.concatenate([(tris[:, 0] + tris[:, 1]) / 2, (tris[:, 1] + tris[:, 2]) / 2, (tris[:, 2] + tris[:, 0]) / 2])
    return mids, np.tile(area / 3, 3)


def _refined_tet_rule(levels):
    """Midpoint-subdivided 4-point rule on the unit tet: barycentric points and equal weights."""
    a, b = 0.5854101966249685, 0.1381966011250105
    tet4 = np.full((4, 4), b) + (a - b) * np.eye(4)
    children = [np.eye(4)]
    for _ in range(levels):
        nxt = []
        for v in children:
            m = {(i, j): 0.5 * (v[i] + v[j]) for i in range(4) for j in range(i + 1, 4)}
            nxt += [np.array(t) for t in (
                (v[0], m[0, 1], m[0, 2], m[0, 3]), (m[0, 1], v[1], m[1, 2], m[1, 3]),
                (m[0, 2], m[1, 2], v[2], m[2, 3]), (m[0, 3], m[1, 3], m[2, 3], v[3]),
                (m[0, 1], m[0, 2], m[0, 3], m[1, 3]), (m[0, 1], m[0, 2], m[1, 2], m[1, 3]),
                (m[0, 2], m[0, 3], m[1, 3], m[2, 3]), (m[0, 2], m[1, 2], m[1, 3], m[2, 3]))]
        children = nxt
    bary = np.concatenate([tet4 @ c for c in children])
    return bary, np.full(len(bary), 1.0 / len(bary))


def test_exact_tet_integrals_against_refined_rule():
    tet = np.array([[[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]])
    bary, frac = _refined_tet_rule(4)
    pts = bary @ tet[0]
    w = frac / 6.0
    for z in (np.array([1.5, 1.2, 0.9]), np.array([-0.4, 0.3, 0.2])):
        r = pts - z
        rn = np.linalg.norm(r, axis=1)
        H = (np.eye(3)[None] * rn[:, None, None] ** -3 - 3 * np.einsum("qa,qb->qab", r, r) * rn[:, None, None] ** -5)
        ref = np.einsum("q,qab->ab", w, H) / FOUR_PI
        np.testing.assert_allclose(_exact_tet_integrals(z, tet)[0], ref, rtol=1e-4, atol=1e-6 * np.abs(ref).max())


def _solid_angle(z, tri):
    """Van Oosterom-Strackee signed solid angle of a triangle seen from z."""
    a, b, c = tri - z
    la, lb, lc = np.linalg.norm(a), np.linalg.norm(b), np.linalg.norm(c)
    den = la * lb * lc + (a @ b) * lc + (b @ c) * la + (c @ a) * lb
    return 2 * np.arctan2(a @ np.cross(b, c), den)


def test_facet_flux_against_solid_angle_differences():
    rng = np.random.default_rng(5)
    tri = rng.normal(size=(4, 3, 3))
    for z in rng.normal(size=(5, 3)) * 2:
        h = 1e-6
        for t in range(4):
            fd = np.array([_solid_angle(z + h * e, tri[t]) - _solid_angle(z - h * e, tri[t]) for e in np.eye(3)])
            np.testing.assert_allclose(_facet_flux(z, tri[t:t + 1])[0], -fd / (2 * h) / FOUR_PI, rtol=1e-6, atol=1e-10)


def test_facet_flux_cancels_over_closed_boundary(small_head):
    tri = small_head.vertices[small_head.facets]
    for z in ([0.0, 0, 0], [40.0, -30.0, 20.0]):
        f = _facet_flux(np.array(z), tri)
        assert np.abs(f.sum(axis=0)).max() <= 1e-12 * np.abs(f).sum(axis=0).max()


# ---------------------------------------------------------------------------
# regular part and traces
# ---------------------------------------------------------------------------


def test_homogeneous_background_has_no_volume_source(small_cyl):
    reg = RegularPartSolver(small_cyl, ConductivityField({1: 3.0}))
    assert len(reg.block(3.0).index) == 0


def test_layered_flux_balance(small_head, layered):
    reg = RegularPartSolver(small_head, layered)
    for z in ([0, 0, 0], [20, -10, 15.0]):
        b, g, flags = reg.load(np.array(z, float), np.array([0.0, 0.6, 0.8]))
        assert flags["flux_defect"] <= 1e-6
        assert abs(b.sum()) <= 1e-12 * np.abs(b).sum()


def test_regular_part_rejects_inclusions(small_cyl):
    with pytest.raises(ConfigError):
        RegularPartSolver(small_cyl, ConductivityField({1: 1.0}, [((0, 0, 3.5), 1.0, 2.0)]))


def test_interface_warning(small_head, layered):
    z = np.array([0.0, 0.0, 74.0])  # brain cell next to the skull
    with pytest.warns(QuadratureWarning):
        solve_regular_part(small_head, layered, z, [0, 0, 1.0])


def _boundary_mean(mesh, values):
    w = mesh.facet_load()
    return (w @ values) / w.sum()


@pytest.mark.parametrize("mode", ["exact", "free_space", "ntd_shortcut"])
def test_trace_zero_mean(small_cyl, mode):
    tr = dipole_trace(small_cyl, ConductivityField({1: 1.0}), [1.0, 2.0, 3.5], [1.0, 1.0, 0.0], mode)
    assert abs(_boundary_mean(small_cyl, tr.values)) <= 1e-10 * np.abs(tr.values).max()
    assert np.linalg.norm(tr.d) == pytest.approx(1.0, abs=1e-12)


def test_exact_trace_zero_mean_layered(small_head, layered):
    tr = dipole_trace(small_head, layered, [10.0, 5.0, -5.0], [0, 1.0, 0], "exact")
    assert abs(_boundary_mean(small_head, tr.values)) <= 1e-10 * np.abs(tr.values).max()


def test_trace_errors(small_cyl, small_head, layered):
    with pytest.raises(ConfigError):
        dipole_trace(small_head, layered, [0, 0, 0], [1, 0, 0], "ntd_shortcut")
    with pytest.raises(ConfigError):
        dipole_trace(small_cyl, ConductivityField({1: 1.0}), [0, 0, 3.5], [1, 0, 0], "bogus")
    with pytest.raises(GeometryError):
        dipole_trace(small_cyl, ConductivityField({1: 1.0}), [30, 0, 3.5], [1, 0, 0])
    with pytest.warns(QuadratureWarning):
        dipole_trace(small_cyl, ConductivityField({1: 1.0}), [9.5, 0, 3.5], [1, 0, 0])


def test_exact_and_ntd_shortcut_agree(fine_cyl):
    sig = ConductivityField({1: 1.0})
    ctx = DipoleContext(fine_cyl, sig)
    w = fine_cyl.facet_mass()
    for z, d in (([2.0, 1.0, 3.5], [1.0, 0, 0]), ([-3.0, 4.0, 2.0], [0.3, -0.5, 0.8])):
        a = dipole_trace(fine_cyl, sig, z, d, "exact", ctx).values
        b = dipole_trace(fine_cyl, sig, z, d, "ntd_shortcut", ctx).values
        rel = np.sqrt((a - b) @ (w @ (a - b)) / (a @ (w @ a)))
        assert rel <= 0.01


@pytest.mark.filterwarnings("ignore::eitfactor.errors.QuadratureWarning")
def test_homogeneity_in_sigma(small_cyl):
    a = dipole_trace(small_cyl, ConductivityField({1: 1.0}), [1.0, -2.0, 3.0], [0, 0, 1.0]).values
    b = dipole_trace(small_cyl, ConductivityField({1: 4.0}), [1.0, -2.0, 3.0], [0, 0, 1.0]).values
    np.testing.assert_allclose(b, a / 4, atol=1e-12 * np.abs(a).max())


def test_cylinder_reflection_symmetry(fine_cyl):
    """Reflecting z through the axis and negating the tangential part of d rotates the trace."""
    sig = ConductivityField({1: 1.0})
    ctx = DipoleContext(fine_cyl, sig)
    z = np.array([3.0, 1.0, 3.5])
    d = np.array([0.6, 0.0, 0.8])
    a = dipole_trace(fine_cyl, sig, z, d, "exact", ctx)
    zr = np.array([-z[0], -z[1], z[2]])
    dr = np.array([-d[0], -d[1], d[2]])
    b = dipole_trace(fine_cyl, sig, zr, dr, "exact", ctx)
    # compare a at x with b at the rotated point (-x, -y, z) via the electrode projections
    lay = build_layout(fine_cyl, range(101, 109))
    pa = project_pm(a, lay, fine_cyl).coefficients
    pb = project_pm(b, lay, fine_cyl).coefficients
    rotated = np.roll(pb, 4)
    assert np.linalg.norm(pa - rotated) <= 0.02 * np.linalg.norm(pa)


# ---------------------------------------------------------------------------
# projector
# ---------------------------------------------------------------------------


def _pw_constant(mesh, layout, coef):
    """Facet-wise constant field equal to coef_i on E_i and zero on the gap."""
    f = np.zeros(len(mesh.facets))
    for i, fac in enumerate(layout.electrodes):
        f[fac] = coef[i]
    return f


def test_projector_fixes_its_range(small_cyl, small_cyl_layout):
    rng = np.random.default_rng(0)
    c = rng.normal(size=8)
    c -= (c @ small_cyl_layout.areas) / small_cyl_layout.areas.sum()
    out = project_pm(_pw_constant(small_cyl, small_cyl_layout, c), small_cyl_layout, small_cyl, on="facets")
    np.testing.assert_allclose(out.coefficients, c, atol=1e-14 * np.abs(c).max())
    zero = project_pm(np.zeros(len(small_cyl.boundary_nodes)), small_cyl_layout, small_cyl)
    assert not zero.coefficients.any()


def test_projector_idempotent(small_cyl, small_cyl_layout):
    rng = np.random.default_rng(1)
    w = small_cyl.facet_load()
    worst = 0.0
    for _ in range(20):
        f = rng.normal(size=len(small_cyl.boundary_nodes))
        f -= (w @ f) / w.sum()
        c = project_pm(f, small_cyl_layout, small_cyl).coefficients
        again = project_pm(_pw_constant(small_cyl, small_cyl_layout, c), small_cyl_layout, small_cyl, on="facets")
        worst = max(worst, np.abs(again.coefficients - c).max() / np.abs(c).max())
    assert worst <= 1e-12


def test_projector_gap_consistency(small_cyl, small_cyl_layout):
    rng = np.random.default_rng(2)
    w = small_cyl.facet_load()
    f = rng.normal(size=len(small_cyl.boundary_nodes))
    f -= (w @ f) / w.sum()
    c = project_pm(f, small_cyl_layout, small_cyl).coefficients
    assert abs(c @ small_cyl_layout.areas) <= 1e-10 * np.abs(f).max() * small_cyl.boundary_area
    with pytest.raises(CompatibilityError):
        project_pm(f + 1.0, small_cyl_layout, small_cyl)
    with pytest.raises(ValueError):
        pm_weights(small_cyl, small_cyl_layout, on="edges")


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_projection_scales_linearly(c):
    mesh, lay, tr = _scaling_setup()
    scaled = DipoleTrace(tr.z, tr.d, c * tr.values, tr.mode)
    np.testing.assert_allclose(project_pm(scaled, lay, mesh).coefficients,
                               c * project_pm(tr, lay, mesh).coefficients, rtol=1e-12, atol=0)


_SETUP = {}


def _scaling_setup():
    if "s" not in _SETUP:
        mesh = cylinder_mesh([(8, 3.5)], 4, 1.0, h_max=2.5)
        lay = build_layout(mesh, range(101, 109))
        tr = dipole_trace(mesh, ConductivityField({1: 1.0}), [1.0, 2.0, 3.5], [1.0, 0, 0], "free_space")
        _SETUP["s"] = (mesh, lay, tr)
    return _SETUP["s"]


@pytest.mark.filterwarnings("ignore::eitfactor.errors.QuadratureWarning")
@pytest.mark.parametrize("mode", ["exact", "free_space", "ntd_shortcut"])
def test_projector_matches_per_point_solves_homogeneous(small_cyl, small_cyl_layout, mode):
    sig = ConductivityField({1: 1.0})
    proj = DipoleProjector(small_cyl, sig, small_cyl_layout, mode)
    pts = np.array([[0.0, 0, 3.5], [2.0, -3.0, 2.5], [-4.0, 1.0, 4.0]])
    basis, _ = proj.project(pts)
    for p, z in enumerate(pts):
        # some directions vanish by symmetry, so scale by the point's largest coefficient
        scale = np.abs(basis[p]).max()
        for k, d in enumerate(np.eye(3)):
            ref = project_pm(dipole_trace(small_cyl, sig, z, d, mode, proj.context), small_cyl_layout, small_cyl)
            np.testing.assert_allclose(basis[p, k], ref.coefficients, rtol=0, atol=1e-10 * scale)


def test_projector_matches_per_point_solves_layered(small_head, small_head_layout, layered):
    proj = DipoleProjector(small_head, layered, small_head_layout, "exact")
    pts = np.array([[0.0, 0, 0], [30.0, 20.0, -10.0], [0.0, 0.0, 62.0]])
    dirs = np.array([[1.0, 1, 1], [1, -1, 0.5]])
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    coef, flags = proj.coefficients(pts, dirs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", QuadratureWarning)
        for p, z in enumerate(pts):
            for k, d in enumerate(dirs):
                ref = project_pm(dipole_trace(small_head, layered, z, d, "exact", proj.context),
                                 small_head_layout, small_head).coefficients
                np.testing.assert_allclose(coef[p, k], ref, rtol=0, atol=1e-10 * np.abs(ref).max())
    assert set(flags) >= {"near_interface", "sigma_z", "h_loc"}


def test_projector_modes_differ(small_head, small_head_layout, layered):
    z = np.array([[30.0, 30.0, 0.0]])
    a = DipoleProjector(small_head, layered, small_head_layout, "exact").project(z)[0]
    b = DipoleProjector(small_head, layered, small_head_layout, "free_space").project(z)[0]
    assert np.linalg.norm(a - b) > 0.05 * np.linalg.norm(a)


def test_projector_ntd_needs_homogeneous(small_head, small_head_layout):
    with pytest.raises(ConfigError):
        DipoleProjector(small_head, ConductivityField(HEAD_SIGMA), small_head_layout, "ntd_shortcut")
