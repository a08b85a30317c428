"""Dense vector primitives shared by every numeric module.

All arithmetic is float64; stores persist float32 (see capfuse.data).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateMean, DimMismatch, ZeroNorm

# Norms at or below this are treated as zero; 1e-6 is the tolerance used
# for unit-norm and symmetry invariants at the f32/f64 boundary.
EPS_NORM = 1e-12
UNIT_TOL = 1e-6


def as_f64(x) -> np.ndarray:
    """Coerce to a float64 array and reject non-finite entries."""
    a = np.asarray(x, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError("non-finite entries in input")
    return a


def l2_normalize(v) -> np.ndarray:
    """Scale v to unit L2 norm."""
    v = as_f64(v)
    n = float(np.linalg.norm(v))
    if n <= EPS_NORM:
        raise ZeroNorm(f"norm {n:.3e} <= {EPS_NORM}")
    return v / n


def normalize_rows(m) -> np.ndarray:
    """Row-wise l2_normalize of a 2-D array."""
    m = as_f64(m)
    norms = np.linalg.norm(m, axis=1)
    if (norms <= EPS_NORM).any():
        bad = int(np.argmin(norms))
        raise ZeroNorm(f"row {bad} has norm {norms[bad]:.3e}")
    return m / norms[:, None]


def cosine_sim_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities, out[i, j] = cos(a_i, b_j).

    a is N x d, b is K x d; the result is N x K with entries in [-1, 1].
    """
    a = np.atleast_2d(as_f64(a))
    b = np.atleast_2d(as_f64(b))
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"dim {a.shape[1]} vs {b.shape[1]}")
    return normalize_rows(a) @ normalize_rows(b).T


def mean_renormalize(vs) -> np.ndarray:
    """Renormalized mean of a nonempty list of unit vectors.

    Raises DegenerateMean when the inputs cancel (an antipodal prototype
    carries no direction, so surfacing it beats silently returning one).
    """
    m = np.atleast_2d(as_f64(vs))
    if m.shape[0] == 0:
        raise ValueError("empty vector list")
    mean = m.mean(axis=0)
    n = float(np.linalg.norm(mean))
    if n <= EPS_NORM:
        raise DegenerateMean(f"mean norm {n:.3e}")
    return mean / n
