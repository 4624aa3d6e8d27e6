"""Dense linear algebra and unit-sphere geometry used by the steering pipeline.

Vectors are 1-D float64 numpy arrays, matrices are 2-D float64 arrays with
samples stored as columns (d x n).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AllZeroSpectrum,
    AntipodalDirection,
    BatchTooSmall,
    DimMismatch,
    NotUnit,
    NumericalFailure,
    ZeroVector,
)

STD_FLOOR = 1e-8
UNIT_TOL = 1e-6
LERP_FALLBACK_SIN = 1e-7
ANTIPODAL_TOL = 1e-9
DEFAULT_ETA = 0.8


@dataclass(frozen=True)
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


@dataclass(frozen=True)
class Projector:
    """Orthogonal projector P = B B^T onto the span of an orthonormal basis B (d x k)."""

    basis: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=np.float64)
        if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
            raise DimMismatch(f"basis must be a non-empty d x k matrix, got shape {b.shape}")
        gram = b.T @ b
        if not np.allclose(gram, np.eye(b.shape[1]), atol=1e-8, rtol=0.0):
            raise NumericalFailure("basis columns are not orthonormal")
        object.__setattr__(self, "basis", b)

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def matrix(self) -> np.ndarray:
        return self.basis @ self.basis.T


def _as_vec(h) -> np.ndarray:
    v = np.asarray(h, dtype=np.float64)
    if v.ndim != 1:
        raise DimMismatch(f"expected a vector, got shape {v.shape}")
    return v


def zscore_batch(diffs: np.ndarray) -> tuple[np.ndarray, ZScoreStats]:
    """Standardize each row (coordinate) of a d x n batch with population statistics.

    Coordinates whose std is at or below the floor are only centered.
    """
    x = np.asarray(diffs, dtype=np.float64)
    if x.ndim != 2:
        raise DimMismatch(f"expected a d x n matrix, got shape {x.shape}")
    if x.shape[1] < 2:
        raise BatchTooSmall(f"z-scoring needs at least 2 columns, got {x.shape[1]}")
    mean = x.mean(axis=1)
    std = x.std(axis=1)
    centered = x - mean[:, None]
    flat = std <= STD_FLOOR
    scale = np.where(flat, 1.0, std)
    out = centered / scale[:, None]
    return out, ZScoreStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def compact_svd(x: np.ndarray) -> SvdResult:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimMismatch(f"expected a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalFailure("matrix has non-finite entries")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(str(exc)) from exc
    return SvdResult(u=u, singular_values=s, vt=vt)


def rank_by_energy(singular_values, eta: float = DEFAULT_ETA) -> int:
    """Smallest k whose leading singular values hold at least `eta` of the squared energy."""
    s = np.asarray(singular_values, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty spectrum")
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    energy = s**2
    total = energy.sum()
    if total == 0.0:
        raise AllZeroSpectrum("every singular value is zero")
    ratios = np.cumsum(energy) / total
    # guard the final ratio against round-off so eta=1 always terminates
    ratios[-1] = 1.0
    return int(np.searchsorted(ratios, eta, side="left")) + 1


def _check_unit(v: np.ndarray, name: str) -> None:
    n = np.linalg.norm(v)
    if abs(n - 1.0) > UNIT_TOL:
        raise NotUnit(f"{name} has norm {n}, expected 1")


def unit_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angles between unit vectors along the last axis, via 2 atan2(|a - b|, |a + b|).

    Unlike arccos of the inner product this stays accurate near 0 and pi.
    """
    return 2.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))


def geodesic(a, b) -> float:
    a = _as_vec(a)
    b = _as_vec(b)
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape} vs {b.shape}")
    _check_unit(a, "a")
    _check_unit(b, "b")
    return float(unit_angles(a, b))


def contraction_factor(lam: float, theta: float) -> float:
    """sin((1 - lam) theta) / sin(theta), extended by continuity to 1 at theta = 0."""
    s = np.sin(theta)
    if s == 0.0:
        return 1.0
    return float(np.sin((1.0 - lam) * theta) / s)


def slerp(a, b, lam: float) -> np.ndarray:
    a = _as_vec(a)
    b = _as_vec(b)
    theta = geodesic(a, b)
    if np.pi - theta < ANTIPODAL_TOL:
        raise AntipodalDirection("slerp endpoints are antipodal")
    if lam == 0.0:
        return a.copy()
    if lam == 1.0:
        return b.copy()
    s = np.sin(theta)
    if s < LERP_FALLBACK_SIN:
        out = (1.0 - lam) * a + lam * b
        return out / np.linalg.norm(out)
    return (np.sin((1.0 - lam) * theta) / s) * a + (np.sin(lam * theta) / s) * b


def unit_decompose(h) -> tuple[float, np.ndarray]:
    h = _as_vec(h)
    r = float(np.linalg.norm(h))
    if r == 0.0:
        raise ZeroVector("cannot normalize a zero vector")
    return r, h / r


def project(p: Projector, h) -> np.ndarray:
    h = _as_vec(h)
    if h.shape[0] != p.dim:
        raise DimMismatch(f"projector dim {p.dim} vs vector dim {h.shape[0]}")
    return p.basis @ (p.basis.T @ h)


def reject(p: Projector, h) -> np.ndarray:
    h = _as_vec(h)
    return h - project(p, h)


def orthonormal_basis(columns: np.ndarray) -> np.ndarray:
    """QR-orthonormalize the columns of a d x k matrix (helper for tests and synthetic setups)."""
    q, _ = np.linalg.qr(np.asarray(columns, dtype=np.float64))
    return q
