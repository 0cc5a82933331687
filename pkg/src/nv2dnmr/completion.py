"""Low-rank matrix completion by singular value thresholding, and the weighted Frobenius error.

The iteration is the Cai-Candes-Shen scheme, started from ``Y = 0``::

    C = shrink_tau(Y)
    Y <- Y + delta * P_Omega(A - C)

``tau`` defaults to ``5 n`` times the rms of the observed entries, which makes
the result equivariant under rescaling the data. ``scale_step`` switches to the
faster ``delta / p`` step (``p`` the observed fraction); it converges quickly on
exactly low-rank data but can overshoot on sparse, only approximately
low-rank signals, where the iteration is cut off and flagged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.sparse.linalg import ArpackError, svds

DENSE_SVD_BELOW = 256
DIVERGENCE_LIMIT = 1e6


class CompletionError(ValueError):
    pass


@dataclass(frozen=True)
class SVTConfig:
    threshold: float | None = None  # None: 5 n * rms(observed)
    step: float = 1.2
    max_iters: int = 500
    tol: float = 1e-4
    rank_cap: int | None = None
    scale_step: bool = False  # divide the step by the sampling fraction
    seed: int = 0  # start vectors of the iterative SVD

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.step > 0:
            raise ValueError("step must be > 0")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if self.rank_cap is not None and self.rank_cap < 1:
            raise ValueError("rank_cap must be >= 1")
        if not self.step < 2:
            warnings.warn(f"SVT step {self.step} outside the recommended range (0, 2)", stacklevel=3)


@dataclass
class CompletionReport:
    completed: np.ndarray
    iterations: int
    residual: float
    converged: bool
    singular_values: np.ndarray
    threshold: float
    step: float
    sampling_rate: float
    residual_trace: list[float] = field(default_factory=list)
    alpha: float | None = None
    eps_weighted: float | None = None
    eps_unweighted: float | None = None

    @property
    def rank(self) -> int:
        return int(self.singular_values.size)

    def score(self, reference: np.ndarray, weight: np.ndarray | None = None, domain: str = "spectrum") -> None:
        """Fill ``alpha`` and the two errors against ``reference``.

        With ``domain="spectrum"`` both matrices are compared through their 2D
        DFTs, where a peak-supported ``weight`` lives.
        """
        c, r = self.completed, np.asarray(reference)
        if domain == "spectrum":
            c, r = np.fft.fft2(c), np.fft.fft2(r)
        elif domain != "time":
            raise ValueError("domain must be 'spectrum' or 'time'")
        self.alpha = optimal_alpha(c, r)
        self.eps_unweighted = weighted_frobenius_error(c, r)
        if weight is not None:
            self.eps_weighted = weighted_frobenius_error(c, r, weight)

    def to_text(self) -> str:
        lines = [
            f"converged: {str(self.converged).lower()}",
            f"iterations: {self.iterations}",
            f"residual: {self.residual:.6e}",
            f"threshold: {self.threshold:.6e}",
            f"step: {self.step:.6e}",
            f"sampling_rate: {self.sampling_rate:.6f}",
            f"rank: {self.rank}",
        ]
        for key in ("alpha", "eps_weighted", "eps_unweighted"):
            val = getattr(self, key)
            lines.append(f"{key}: {'none' if val is None else f'{val:.6e}'}")
        lines.append("singular_values:")
        lines += [f"  {s:.10e}" for s in self.singular_values]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def low_rank_truncate(a: np.ndarray, r: int) -> np.ndarray:
    """Best rank-``r`` approximation in the Frobenius norm."""
    if r < 0:
        raise ValueError("rank must be >= 0")
    a = np.asarray(a)
    if r == 0:
        return np.zeros_like(a)
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    r = min(r, s.size)
    return (u[:, :r] * s[:r]) @ vh[:r]


def shrink(y: np.ndarray, tau: float) -> np.ndarray:
    """Singular value soft-thresholding: U max(S - tau, 0) V^T."""
    u, s, vh = np.linalg.svd(y, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    k = int(np.count_nonzero(s))
    return (u[:, :k] * s[:k]) @ vh[:k]


def _top_svd(y: np.ndarray, tau: float, k: int, rng, rank_cap: int | None):
    """Singular triplets of ``y`` above ``tau``; iterative for large matrices, growing k on demand."""
    n = min(y.shape)
    if not y.any():
        return np.zeros((y.shape[0], 0)), np.zeros(0), np.zeros((0, y.shape[1]))
    if n < DENSE_SVD_BELOW:
        u, s, vh = np.linalg.svd(y, full_matrices=False)
        keep = int(np.count_nonzero(s > tau))
        if rank_cap is not None:
            keep = min(keep, rank_cap)
        return u[:, :keep], s[:keep], vh[:keep]
    k = max(1, min(k, n - 2))
    while True:
        v0 = rng.standard_normal(min(y.shape))
        try:
            u, s, vh = svds(y, k=k, v0=v0)
        except ArpackError:
            u, s, vh = np.linalg.svd(y, full_matrices=False)
            break
        order = np.argsort(s)[::-1]
        u, s, vh = u[:, order], s[order], vh[order]
        if s[-1] <= tau or k >= n - 2 or (rank_cap is not None and k >= rank_cap):
            break
        k = min(n - 2, k + 5)
    if s[-1] > tau and k >= n - 2 and (rank_cap is None or k < rank_cap):
        u, s, vh = np.linalg.svd(y, full_matrices=False)
    keep = int(np.count_nonzero(s > tau))
    if rank_cap is not None:
        keep = min(keep, rank_cap)
    return u[:, :keep], s[:keep], vh[:keep]


def svt_complete(observed, mask: np.ndarray | None = None, cfg: SVTConfig | None = None) -> CompletionReport:
    """Complete a partially observed real matrix.

    ``observed`` is a :class:`~nv2dnmr.protocols.SignalMatrix` or an array;
    unobserved entries are taken from ``mask`` (False) or, when no mask is
    given, from NaN values. Non-convergence is reported, never raised.
    """
    cfg = cfg or SVTConfig()
    values = np.asarray(getattr(observed, "values", observed), dtype=float)
    if mask is None:
        mask = getattr(observed, "mask", None)
    if mask is None:
        mask = ~np.isnan(values)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != values.shape:
        raise CompletionError("mask shape does not match the matrix")
    m = int(mask.sum())
    if m == 0:
        raise CompletionError("no observed entries")
    a = np.where(mask, np.nan_to_num(values), 0.0)
    norm_obs = float(np.linalg.norm(a))
    p = m / a.size
    n = max(a.shape)
    if norm_obs == 0:
        z = np.zeros_like(a)
        return CompletionReport(z, 0, 0.0, True, np.zeros(0), 0.0, cfg.step, p)
    tau = cfg.threshold if cfg.threshold is not None else 5.0 * n * norm_obs / np.sqrt(m)
    step = cfg.step / p if cfg.scale_step else cfg.step

    rng = np.random.default_rng(cfg.seed)
    y = np.zeros_like(a)
    c = np.zeros_like(a)
    s = np.zeros(0)
    k = 1
    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        u, sv, vh = _top_svd(y, tau, k + 1, rng, cfg.rank_cap)
        sv = sv - tau
        c_new = (u * sv) @ vh
        resid = np.where(mask, a - c_new, 0.0)
        rel = float(np.linalg.norm(resid)) / norm_obs
        if not np.isfinite(rel) or rel > DIVERGENCE_LIMIT:
            # the scaled step overshoots at very sparse sampling; keep the last finite iterate
            it -= 1
            break
        c, s, k = c_new, sv, sv.size
        trace.append(rel)
        if rel <= cfg.tol:
            converged = True
            break
        y = y + step * resid
    residual = trace[-1] if trace else 1.0
    return CompletionReport(c, it, residual, converged, s, float(tau), float(step), p, trace)


def optimal_alpha(c: np.ndarray, r: np.ndarray, w: np.ndarray | None = None) -> float:
    """Real least-squares scale alpha minimizing ||W (alpha C - R)||_F."""
    w2 = 1.0 if w is None else np.asarray(w, dtype=float) ** 2
    den = float(np.sum(w2 * np.abs(c) ** 2))
    if den == 0:
        return 1.0
    return float(np.sum(w2 * np.real(np.conj(c) * r)) / den)


def weighted_frobenius_error(
    c: np.ndarray, r: np.ndarray, w: np.ndarray | None = None, alpha: float | None = None
) -> float:
    """||W (alpha C - R)||_F / ||W R||_F, with alpha least-squares optimal unless given."""
    c, r = np.asarray(c), np.asarray(r)
    if c.shape != r.shape:
        raise ValueError("C and R must have the same shape")
    if w is None:
        w = np.ones(r.shape)
    w = np.asarray(w, dtype=float)
    if w.shape != r.shape:
        raise ValueError("W must match the shape of R")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    den = float(np.linalg.norm(w * r))
    if den == 0:
        raise ZeroDivisionError("||W R||_F is zero")
    if alpha is None:
        alpha = optimal_alpha(c, r, w)
    return float(np.linalg.norm(w * (alpha * c - r)) / den)


def make_peak_weight(peaks: Iterable, n: int, halo: int = 1) -> np.ndarray:
    """Indicator of the peak bins plus a square halo, on an n x n (periodic) frequency grid.

    ``peaks`` holds ``(k1, k2)`` bin pairs or objects with a ``bins`` attribute.
    Folded (half-band) peaks are mirrored into all four sign quadrants.
    """
    peaks = list(peaks)
    if not peaks:
        raise ValueError("peak list is empty")
    if halo < 0:
        raise ValueError("halo must be >= 0")
    w = np.zeros((n, n))
    offsets = np.arange(-halo, halo + 1)
    for pk in peaks:
        folded = hasattr(pk, "bins")
        k1, k2 = pk.bins if folded else pk
        images = {(k1, k2)}
        if folded:
            images = {(a % n, b % n) for a in (k1, -k1) for b in (k2, -k2)}
        for a, b in images:
            w[np.ix_((a + offsets) % n, (b + offsets) % n)] = 1.0
    return w


def synthetic_low_rank(n: int, rank: int, seed: int) -> np.ndarray:
    """n x n product of Gaussian factors."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, rank)) @ rng.standard_normal((rank, n))
