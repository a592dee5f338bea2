"""KL-divergence NMF with multiplicative updates.

``nmf_full`` learns both factors; ``nmf_fixed_w`` holds the dictionary fixed
and estimates activations only (optionally letting a subset of dictionary
columns adapt, which is how the denoising mode absorbs noise).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12


@dataclass(frozen=True)
class NmfOptions:
    m: int = 25
    max_iters: int = 200
    rel_tol: float = 1e-4
    seed: int = 0
    eps: float = EPS

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")


@dataclass
class NmfResult:
    w: np.ndarray
    h: np.ndarray
    divergence: list = field(default_factory=list)  # one value per state, starting with the init

    @property
    def iterations(self) -> int:
        return len(self.divergence) - 1

    @property
    def final_divergence(self) -> float:
        return self.divergence[-1]


def _as_matrix(v) -> np.ndarray:
    v = getattr(v, "mags", v)
    return np.asarray(v, dtype=np.float64)


def kl_divergence(v, approx) -> float:
    """Generalised KL divergence sum(v log(v/approx) - v + approx), with 0 log 0 = 0."""
    v = _as_matrix(v)
    approx = np.asarray(approx, dtype=np.float64)
    if v.shape != approx.shape:
        raise ValueError(f"shape mismatch: {v.shape} vs {approx.shape}")
    pos = v > 0
    total = np.sum(approx) - np.sum(v)
    total += np.sum(v[pos] * np.log(v[pos] / approx[pos]))
    return float(total)


def _check_input(v: np.ndarray):
    if v.ndim != 2:
        raise ValueError(f"expected a 2-D spectrogram, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("spectrogram contains non-finite values")
    if np.any(v < 0):
        raise ValueError("spectrogram contains negative values")


def _converged(prev: float, cur: float, rel_tol: float) -> bool:
    if rel_tol <= 0:
        return False
    if prev <= 0:
        return True
    return (prev - cur) / prev < rel_tol


def _update_h(v, w, h, eps):
    ratio = v / np.maximum(w @ h, eps)
    h = h * (w.T @ ratio) / np.maximum(w.sum(axis=0)[:, None], eps)
    return np.maximum(h, eps)


def _update_w(v, w, h, eps, cols=slice(None)):
    ratio = v / np.maximum(w @ h, eps)
    hc = h[cols]
    w = w.copy()
    w[:, cols] = np.maximum(
        w[:, cols] * (ratio @ hc.T) / np.maximum(hc.sum(axis=1)[None, :], eps), eps)
    return w


def nmf_full(v, opts: NmfOptions = NmfOptions()) -> NmfResult:
    """Factorise ``v ~ W H`` with W (F x m) and H (m x N) both learned."""
    v = _as_matrix(v)
    _check_input(v)
    eps = opts.eps
    rng = np.random.default_rng(opts.seed)
    f, n = v.shape
    w = rng.uniform(eps, 1.0, size=(f, opts.m))
    h = rng.uniform(eps, 1.0, size=(opts.m, n))
    trace = [kl_divergence(v, np.maximum(w @ h, eps))]
    for _ in range(opts.max_iters):
        h = _update_h(v, w, h, eps)
        w = _update_w(v, w, h, eps)
        trace.append(kl_divergence(v, np.maximum(w @ h, eps)))
        if _converged(trace[-2], trace[-1], opts.rel_tol):
            break
    return NmfResult(w, h, trace)


def initial_activations(v: np.ndarray, w: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Constant activations matching the total mass of ``v``.

    Independent of column order, so fixed-dictionary runs are equivariant
    under permutations of the dictionary.
    """
    n = v.shape[1]
    scale = v.sum() / max(n * w.sum(), eps)
    return np.full((w.shape[1], n), max(scale, eps))


def nmf_fixed_w(v, w, opts: NmfOptions = NmfOptions(), update_cols=None) -> NmfResult:
    """Estimate activations for a fixed dictionary ``w``.

    ``update_cols`` (indices or boolean mask) selects dictionary columns that
    are re-estimated alongside H; all others stay fixed. ``opts.m`` is ignored.
    """
    v = _as_matrix(v)
    _check_input(v)
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != v.shape[0]:
        raise ValueError(f"dictionary shape {w.shape} does not match spectrogram with "
                         f"{v.shape[0]} bins")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("dictionary must be finite and non-negative")
    eps = opts.eps
    w = np.maximum(w, eps)
    h = initial_activations(v, w, eps)
    if update_cols is not None:
        update_cols = np.flatnonzero(np.isin(np.arange(w.shape[1]), update_cols)) \
            if np.asarray(update_cols).dtype != bool else np.flatnonzero(update_cols)
        if update_cols.size == 0:
            update_cols = None
    trace = [kl_divergence(v, np.maximum(w @ h, eps))]
    for _ in range(opts.max_iters):
        h = _update_h(v, w, h, eps)
        if update_cols is not None:
            w = _update_w(v, w, h, eps, update_cols)
        trace.append(kl_divergence(v, np.maximum(w @ h, eps)))
        if _converged(trace[-2], trace[-1], opts.rel_tol):
            break
    return NmfResult(w, h, trace)
