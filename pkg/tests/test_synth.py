import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eitfactor.errors import DegenerateError, IncompatibilityError, PatternError
from eitfactor.fem import ConductivityField, DataMatrix
from eitfactor.synth import (
    PatternSet,
    add_noise,
    difference_data,
    farthest_pair_patterns,
    opposite_patterns,
    simulate,
    standard_normal,
)


def _matrix(seed, m=8, n=4):
    rng = np.random.default_rng(seed)
    P = np.zeros((n, m), dtype=int)
    P[np.arange(n), np.arange(n)] = 1
    P[np.arange(n), np.arange(n) + n] = -1
    return DataMatrix(rng.normal(size=(m, n)), P, np.ones(m), "fp")


def test_opposite_patterns_counts():
    one = opposite_patterns(32, [range(32)])
    assert one.n_patterns == 16 and one.n_electrodes == 32
    assert one.patterns[3, 3] == 1 and one.patterns[3, 19] == -1
    two = opposite_patterns(40, [range(20), range(20, 40)])
    assert two.patterns.shape == (20, 40)
    assert two.descriptor["kind"] == "opposite_per_ring"
    tiny = opposite_patterns(2, [[0, 1]])
    np.testing.assert_array_equal(tiny.patterns, [[1, -1]])
    with pytest.raises(PatternError):
        opposite_patterns(3, [range(3)])


def test_pattern_invariants():
    for ps in (opposite_patterns(32, [range(32)]), farthest_pair_patterns(np.random.default_rng(0).normal(size=(31, 3)), 20)):
        P = ps.patterns
        assert (P.sum(axis=1) == 0).all()
        assert ((P == 1).sum(axis=1) == 1).all() and ((P == -1).sum(axis=1) == 1).all()
        assert np.linalg.matrix_rank(P) == ps.n_patterns
    with pytest.raises(PatternError):
        PatternSet(np.array([[1, -1, 0], [-1, 1, 0]]), {})
    with pytest.raises(PatternError):
        PatternSet(np.array([[1, 1, -2]]), {})
    with pytest.raises(PatternError):
        farthest_pair_patterns(np.zeros((4, 3)), 4)


def test_farthest_pairs_prefer_distant_electrodes():
    centers = np.array([[0, 0, 0], [1, 0, 0], [10, 0, 0], [11, 0, 0]], dtype=float)
    ps = farthest_pair_patterns(centers, 1)
    np.testing.assert_array_equal(ps.patterns[0], [1, 0, 0, -1])


def test_noise_zero_is_identity():
    D = _matrix(0)
    out = add_noise(D, 0.0, 5)
    assert np.array_equal(out.entries, D.entries)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**63 - 1), st.floats(1e-4, 0.5), st.integers(0, 1000))
def test_noise_level_exact(seed, delta, mseed):
    D = _matrix(mseed)
    out = add_noise(D, delta, seed)
    rel = np.linalg.norm(out.entries - D.entries) / np.linalg.norm(D.entries)
    assert abs(rel - delta) <= 1e-12 * delta
    assert out.provenance["kind"] == "noisy" and out.provenance["seed"] == seed


def test_noise_deterministic():
    D = _matrix(1)
    a, b, c = add_noise(D, 0.05, 7), add_noise(D, 0.05, 7), add_noise(D, 0.05, 8)
    assert np.array_equal(a.entries, b.entries)
    assert not np.array_equal(a.entries, c.entries)


def test_noise_errors():
    D = _matrix(2)
    with pytest.raises(ValueError):
        add_noise(D, -0.1, 0)
    zero = DataMatrix(np.zeros((8, 4)), D.patterns, D.areas, "fp")
    with pytest.raises(DegenerateError):
        add_noise(zero, 0.01, 0)


def test_noise_unbiased():
    D = _matrix(3)
    delta = 0.1
    acc = np.zeros_like(D.entries)
    for seed in range(1000):
        acc += add_noise(D, delta, seed).entries - D.entries
    mean = acc / 1000
    assert np.linalg.norm(mean) <= 5 / np.sqrt(1000) * delta * np.linalg.norm(D.entries)


def test_standard_normal_moments():
    z = standard_normal(123, (200_000,))
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01
    assert standard_normal(1, (3, 5)).shape == (3, 5)


def test_difference_data():
    D = _matrix(4)
    assert not difference_data(D, D).entries.any()
    other = _matrix(5)
    diff = difference_data(D, other)
    np.testing.assert_array_equal(diff.entries, D.entries - other.entries)
    assert diff.provenance["parents"][0] == D.provenance
    perm = np.array([2, 0, 3, 1])

    def permuted(M):
        return DataMatrix(M.entries[:, perm], M.patterns[perm], M.areas, M.fingerprint)

    np.testing.assert_array_equal(difference_data(permuted(D), permuted(other)).entries, diff.entries[:, perm])
    with pytest.raises(IncompatibilityError):
        difference_data(D, DataMatrix(other.entries, other.patterns, other.areas, "other"))
    with pytest.raises(IncompatibilityError):
        difference_data(D, permuted(other))


def test_simulated_difference_is_nonnegative(small_cyl, small_cyl_layout):
    ps = opposite_patterns(8, [range(8)])
    bg = ConductivityField({1: 1.0})
    ref = simulate(small_cyl, bg, small_cyl_layout, ps)
    meas = simulate(small_cyl, ConductivityField({1: 1.0}, [((0, 4, 3.5), 2.0, 4.0)]), small_cyl_layout, ps)
    diff = difference_data(ref, meas)
    quad = np.einsum("mn,nm->n", diff.entries, ps.patterns)
    assert (quad >= -1e-10 * np.abs(quad).max()).all() and quad.max() > 0
    assert diff.shape == (8, 4)
