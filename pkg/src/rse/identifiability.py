"""Outlier observability and identifiability levels for linear(ized) measurement maps.

For a full-column-rank linear map the measurement distance is
D = M + 1 - rank(H); an outlier vector with at most D - 1 nonzeros is
observable and one with at most floor((D - 1) / 2) nonzeros is identifiable.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

MAX_BRUTE_FORCE_ROWS = 20


def numeric_rank(A, tol: float | None = None) -> int:
    """Number of singular values above ``tol`` (default max(shape) * eps * s_max)."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.size == 0:
        raise ValueError("numeric_rank needs a non-empty 2-D matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    s = np.linalg.svd(A, compute_uv=False)
    if tol is None:
        tol = default_rank_tol(A, s)
    return int(np.count_nonzero(s > tol))


def default_rank_tol(A, s=None) -> float:
    A = np.asarray(A, dtype=float)
    if s is None:
        s = np.linalg.svd(A, compute_uv=False)
    return float(max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0))


def linear_distance(H, tol: float | None = None) -> int:
    """Measurement distance D = M + 1 - rank(H) of the linear map x -> H x."""
    H = np.asarray(H, dtype=float)
    return H.shape[0] + 1 - numeric_rank(H, tol)


def sparsity_levels(D: int) -> tuple[int, int]:
    """(K_o, K_i) = (D - 1, floor((D - 1) / 2))."""
    if D < 1:
        raise ValueError("distance must be at least 1")
    return D - 1, (D - 1) // 2


def brute_force_distance(H, tol: float | None = None) -> int:
    """min over x != 0 of ||H x||_0, by enumerating row subsets.

    The largest row subset Z whose submatrix is rank deficient gives the most
    rows a nonzero x can zero out, so D = M - |Z|. Exponential in M.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.size == 0:
        raise ValueError("need a non-empty 2-D matrix")
    M, n = H.shape
    if M > MAX_BRUTE_FORCE_ROWS:
        raise ValueError(f"brute force limited to {MAX_BRUTE_FORCE_ROWS} rows, got {M}")
    if not np.any(H):
        raise ValueError("distance is undefined for the zero map")
    if tol is None:
        tol = default_rank_tol(H)
    # Any x in the null space of H itself zeroes every row.
    if numeric_rank(H, tol) < n:
        return 0
    for size in range(M, 0, -1):
        for rows in itertools.combinations(range(M), size):
            if numeric_rank(H[list(rows)], tol) < n:
                return M - size
    # Every single row already has full column rank (n == 1, no zero rows).
    return M


@dataclass(frozen=True)
class IdentifiabilityReport:
    M: int
    n_cols: int
    numeric_rank: int
    D: int
    K_o: int
    K_i: int
    rank_tolerance: float
    rank_deficient: bool  # rank below the number of columns

    def __post_init__(self):
        if self.D != self.M + 1 - self.numeric_rank:
            raise ValueError("D must equal M + 1 - rank")
        if (self.K_o, self.K_i) != sparsity_levels(self.D):
            raise ValueError("K_o, K_i inconsistent with D")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def analyze(H, tol: float | None = None) -> IdentifiabilityReport:
    """Report D, K_o and K_i for the linear map H (M x n).

    A polar AC Jacobian always loses one rank to the global phase; the report
    uses the numeric rank as-is and flags the deficiency.
    """
    H = np.asarray(H, dtype=float)
    if tol is None:
        tol = default_rank_tol(H)
    r = numeric_rank(H, tol)
    D = H.shape[0] + 1 - r
    K_o, K_i = sparsity_levels(D)
    return IdentifiabilityReport(H.shape[0], H.shape[1], r, D, K_o, K_i, float(tol), r < H.shape[1])
