"""Identification category selection from normalized singular values."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError

PROJECTION_ZERO_TOL = 1e-8


@dataclass(frozen=True)
class IcsResult:
    singular_values: np.ndarray
    cutoff: float
    d_hat: int
    d_theta1: int
    d_theta2: int

    def to_dict(self) -> dict:
        return {
            "singular_values": [float(v) for v in self.singular_values],
            "cutoff": float(self.cutoff),
            "d_hat": int(self.d_hat),
            "d_theta1": int(self.d_theta1),
            "d_theta2": int(self.d_theta2),
        }


def singular_values_sorted(M) -> np.ndarray:
    """Singular values in ascending order, zero-padded to the column count."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    s = np.linalg.svd(M, compute_uv=False)
    out = np.zeros(M.shape[1])
    out[: s.size] = s[: M.shape[1]]
    return np.sort(out)


def select_category(sv, cutoff: float, d_theta1: int, d_theta2: int, zero_tol: float = PROJECTION_ZERO_TOL) -> IcsResult:
    """Count nuisance-block singular values strictly above ``cutoff``.

    The ``d_theta1`` smallest values must vanish by construction.  Values up
    to ``zero_tol`` (absolute, or relative to the largest value when that
    exceeds one) are clamped to zero; anything larger signals a wiring error
    and raises :class:`ConsistencyError`.
    """
    sv = np.asarray(sv, dtype=float).copy()
    if sv.size != d_theta1 + d_theta2:
        raise ValueError(f"expected {d_theta1 + d_theta2} singular values, got {sv.size}")
    if np.any(np.diff(sv) < 0):
        raise ValueError("singular values must be sorted ascending")
    tol = zero_tol * max(1.0, float(sv[-1]) if sv.size else 1.0)
    head = sv[:d_theta1]
    if np.any(head > tol):
        raise ConsistencyError(f"projection zeros not attained: {head}")
    sv[:d_theta1] = 0.0
    d_hat = int(np.sum(sv[d_theta1:] > cutoff))
    return IcsResult(sv, float(cutoff), d_hat, d_theta1, d_theta2)
