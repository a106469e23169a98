"""Injection patterns, synthetic measurements and the multiplicative noise model."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateError, IncompatibilityError, PatternError
from .fem import DataMatrix, assemble_cem, ntd_cem


@dataclass(frozen=True)
class PatternSet:
    """Pairwise injections: one +1 and one -1 per pattern, the rest 0."""

    patterns: np.ndarray  # (N, M)
    descriptor: dict

    def __post_init__(self):
        P = np.asarray(self.patterns, dtype=np.int64)
        object.__setattr__(self, "patterns", P)
        if P.ndim != 2 or len(P) == 0:
            raise PatternError("pattern set is empty")
        if not (np.isin(P, (-1, 0, 1)).all() and ((P == 1).sum(axis=1) == 1).all()
                and ((P == -1).sum(axis=1) == 1).all()):
            raise PatternError("each pattern needs exactly one +1 and one -1")
        if np.linalg.matrix_rank(P.astype(float)) != len(P):
            raise PatternError("patterns are linearly dependent")

    @property
    def n_patterns(self) -> int:
        return len(self.patterns)

    @property
    def n_electrodes(self) -> int:
        return self.patterns.shape[1]


def _pair(m, a, b):
    p = np.zeros(m, dtype=np.int64)
    p[a], p[b] = 1, -1
    return p


def opposite_patterns(n_electrodes: int, rings) -> PatternSet:
    """Opposite injection within each ring.

    ``rings`` lists electrode indices per ring in angular order. A ring of size
    ``m`` contributes ``m / 2`` patterns pairing its ``k``-th electrode with
    the ``(k + m/2)``-th.
    """
    pats = []
    for ring in rings:
        ring = list(ring)
        if len(ring) % 2:
            raise PatternError(f"ring of odd size {len(ring)}")
        h = len(ring) // 2
        pats += [_pair(n_electrodes, ring[k], ring[k + h]) for k in range(h)]
    return PatternSet(np.array(pats), {"kind": "opposite_per_ring" if len(rings) > 1 else "opposite_ring",
                                       "rings": [list(map(int, r)) for r in rings]})


def farthest_pair_patterns(centers, n_patterns: int) -> PatternSet:
    """Pairs of mutually distant electrodes forming a spanning forest.

    Pairs are taken in order of decreasing distance and kept when they do not
    close a cycle, which keeps the patterns linearly independent. Used for
    layouts without rings (at most ``M - 1`` patterns).
    """
    centers = np.asarray(centers, dtype=float)
    m = len(centers)
    if not 1 <= n_patterns <= m - 1:
        raise PatternError(f"need 1 <= N <= M - 1 = {m - 1}")
    i, j = np.triu_indices(m, 1)
    d = np.linalg.norm(centers[i] - centers[j], axis=1)
    order = np.lexsort((j, i, -np.round(d, 9)))
    parent = list(range(m))

    def root(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    pats = []
    for k in order:
        a, b = root(i[k]), root(j[k])
        if a == b:
            continue
        parent[a] = b
        pats.append(_pair(m, i[k], j[k]))
        if len(pats) == n_patterns:
            break
    return PatternSet(np.array(pats), {"kind": "farthest_pairs", "n": int(n_patterns)})


def simulate(mesh, sigma, layout, patterns: PatternSet) -> DataMatrix:
    """Noise-free electrode voltages for a pattern set."""
    data = ntd_cem(mesh, sigma, layout, patterns.patterns, system=assemble_cem(mesh, sigma, layout))
    data.provenance = {"kind": "clean", "delta": 0.0, "seed": None, "patterns": patterns.descriptor}
    return data


def standard_normal(seed: int, shape) -> np.ndarray:
    """Box-Muller normals from PCG64 uniforms (reproducible across platforms)."""
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    n = int(np.prod(shape))
    half = (n + 1) // 2
    u1 = 1.0 - rng.random(half)  # in (0, 1]
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
    return z.reshape(shape)


def add_noise(clean: DataMatrix, delta: float, seed: int) -> DataMatrix:
    """Entrywise multiplicative Gaussian noise with exact relative Frobenius level ``delta``."""
    if delta < 0:
        raise ValueError("noise level must be non-negative")
    A = clean.entries
    if delta == 0:
        return replace(clean, entries=A.copy(), provenance={**clean.provenance, "kind": "clean", "delta": 0.0})
    norm = np.linalg.norm(A)
    if norm == 0:
        raise DegenerateError("cannot scale noise on an all-zero matrix")
    E = standard_normal(seed, A.shape) * A
    eta = delta * norm / np.linalg.norm(E)
    prov = {**clean.provenance, "kind": "noisy", "delta": float(delta), "seed": int(seed)}
    return replace(clean, entries=A + eta * E, provenance=prov)


def difference_data(ref: DataMatrix, meas: DataMatrix) -> DataMatrix:
    """``ref - meas`` for data on the same layout and patterns."""
    if ref.fingerprint != meas.fingerprint:
        raise IncompatibilityError("data matrices come from different electrode layouts")
    if ref.patterns.shape != meas.patterns.shape or (ref.patterns != meas.patterns).any():
        raise IncompatibilityError("data matrices use different injection patterns")
    prov = {"kind": "difference", "delta": 0.0, "seed": None,
            "parents": [ref.provenance, meas.provenance]}
    return DataMatrix(ref.entries - meas.entries, ref.patterns.copy(), ref.areas.copy(), ref.fingerprint, prov)
