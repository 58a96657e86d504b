"""Multi-refined pseudo label generation.

Seven steps over one video: foreground-similarity refinement of the attention,
top-k coarse foreground mask, class-prototype modulation of the TCAM, temporal
pruning against the original column means, thresholded argmax foreground
labels, lowest-attention background labels, and concatenation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NoAnnotationsError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MplgConfig:
    k_ratio: float = 0.3
    theta: float = 0.8
    background_multiplier: int = 2
    # "distance": softmax of the prototype distances as written;
    # "similarity": softmax of negated distances (nearest prototype weighs most)
    weighting: str = "distance"

    def __post_init__(self):
        if self.weighting not in ("distance", "similarity"):
            raise ConfigurationError(f"weighting must be 'distance' or 'similarity', got {self.weighting!r}")
        if not 0.0 < self.k_ratio <= 0.3:
            raise ConfigurationError(f"k_ratio must lie in (0, 0.3], got {self.k_ratio}")
        if not 0.0 < self.theta < 1.0:
            raise ConfigurationError(f"theta must lie in (0, 1), got {self.theta}")
        if self.background_multiplier != 2:
            raise ConfigurationError("background_multiplier is fixed at 2")

    def scope(self, T: int) -> int:
        """Number of coarse foreground snippets k, capped at floor(0.3 T) but never below 1."""
        k = max(1, math.floor(self.k_ratio * T))
        cap = max(1, math.floor(0.3 * T))
        if k > cap:
            logger.debug("clamping k=%d to %d (T=%d)", k, cap, T)
        return min(k, cap)


@dataclass
class PseudoLabelMatrix:
    Y_hat: np.ndarray  # (T, C+1) binary; last column is background
    from_point: np.ndarray  # (T, C+1) bool, entries set by point labels
    mined: np.ndarray  # (T, C+1) bool, entries produced by mining
    coarse_mask: np.ndarray  # (T,) the top-k mask M, kept for inspection

    @property
    def foreground(self) -> np.ndarray:
        return self.Y_hat[:, :-1]

    @property
    def background(self) -> np.ndarray:
        return self.Y_hat[:, -1]

    def rows(self) -> list[dict]:
        out = []
        for t in range(self.Y_hat.shape[0]):
            for c in np.flatnonzero(self.Y_hat[t]):
                out.append({"t": int(t), "class": int(c)})
        return out


def _top_indices(values: np.ndarray, n: int) -> np.ndarray:
    # stable sort on the negated values: equal scores keep the lower index first
    return np.argsort(-values, kind="stable")[:n]


def _bottom_indices(values: np.ndarray, n: int) -> np.ndarray:
    return np.argsort(values, kind="stable")[:n]


def foreground_similarity(X: np.ndarray, B1) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity to every point-labeled snippet, and its min-max normalized row maximum."""
    B1 = np.asarray(B1, dtype=np.int64)
    if B1.size == 0:
        raise NoAnnotationsError("foreground similarity needs at least one point-labeled snippet")
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = X / safe[:, None]
    U[norms == 0] = 0.0  # zero-norm rows have similarity 0 to everything
    G = U @ U[B1].T
    g = G.max(axis=1)
    lo, hi = g.min(), g.max()
    if hi - lo <= 0:
        return G, np.ones_like(g)
    return G, (g - lo) / (hi - lo)


def refine_attention(A: np.ndarray, G_max: np.ndarray) -> np.ndarray:
    return np.asarray(A, dtype=np.float64) * G_max


def topk_foreground_mask(A_ref: np.ndarray, k: int) -> np.ndarray:
    T = len(A_ref)
    cap = max(1, math.floor(0.3 * T))
    k_eff = min(max(1, k), cap, T)
    if k_eff != k:
        logger.debug("top-k mask: clamped k=%d to %d for T=%d", k, k_eff, T)
    M = np.zeros(T, dtype=np.int64)
    M[_top_indices(np.asarray(A_ref, dtype=np.float64), k_eff)] = 1
    return M


def class_prototypes(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean feature of the point-labeled snippets per class, plus a presence flag."""
    X = np.asarray(X, dtype=np.float64)
    C = Y.shape[1]
    Z = np.zeros((C, X.shape[1]))
    present = np.zeros(C, dtype=bool)
    for c in range(C):
        rows = np.flatnonzero(Y[:, c] > 0)
        if rows.size:
            Z[c] = X[rows].mean(axis=0)
            present[c] = True
    return Z, present


def class_weights(X: np.ndarray, Z: np.ndarray, present: np.ndarray, weighting: str = "distance") -> np.ndarray:
    """Softmax over present classes of the distances to each class prototype; absent classes get 0.

    With a single present class this reduces to weight 1.0 for it. ``weighting="similarity"``
    negates the distances first.
    """
    X = np.asarray(X, dtype=np.float64)
    T, C = X.shape[0], Z.shape[0]
    W = np.zeros((T, C))
    idx = np.flatnonzero(present)
    if idx.size == 0:
        return W
    dist = np.linalg.norm(X[:, None, :] - Z[None, idx, :], axis=2)
    if weighting == "similarity":
        dist = -dist
    e = np.exp(dist - dist.max(axis=1, keepdims=True))
    W[:, idx] = e / e.sum(axis=1, keepdims=True)
    return W


def refine_tcam(S_tilde: np.ndarray, M: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.asarray(S_tilde, dtype=np.float64) * M[:, None] * W


def temporal_prune(S_ref: np.ndarray, S_tilde: np.ndarray) -> np.ndarray:
    """Zero entries below the temporal mean of the original (unrefined) class scores."""
    means = np.asarray(S_tilde, dtype=np.float64).mean(axis=0)
    out = np.array(S_ref, dtype=np.float64, copy=True)
    out[out < means[None, :]] = 0.0
    return out


def foreground_labels(S_ref: np.ndarray, theta: float) -> np.ndarray:
    T, C = S_ref.shape
    Y = np.zeros((T, C), dtype=np.int64)
    best = np.argmax(S_ref, axis=1)  # first maximum wins ties
    keep = S_ref[np.arange(T), best] > theta
    Y[np.arange(T)[keep], best[keep]] = 1
    return Y


def background_labels(A: np.ndarray, k: int, exclude=None) -> np.ndarray:
    """Mark the 2k lowest-attention snippets as background.

    Without ``exclude`` the count is 2k, clamped to T-k when 2k > T. With an
    ``exclude`` mask (snippets already holding a foreground label) those
    snippets are skipped and the next-lowest ones are taken instead, up to
    min(2k, T-k) snippets.
    """
    A = np.asarray(A, dtype=np.float64)
    T = len(A)
    n = 2 * k if 2 * k <= T else T - k
    order = np.argsort(A, kind="stable")
    if exclude is not None:
        n = min(n, T - k)
        order = order[~np.asarray(exclude, dtype=bool)[order]]
    Y = np.zeros(T, dtype=np.int64)
    Y[order[:max(n, 0)]] = 1
    return Y


def mplg(X, Y, S_tilde, A, cfg: MplgConfig = MplgConfig()) -> PseudoLabelMatrix:
    """Run all seven mining steps for one video.

    X: (T, D') fused features; Y: (T, C) point labels (foreground block);
    S_tilde: (T, C) foreground TCAM; A: (T,) mean attention.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)
    S_tilde = np.asarray(S_tilde, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    T, C = S_tilde.shape
    if Y.shape != (T, C) or X.shape[0] != T or A.shape != (T,):
        raise ConfigurationError(f"mplg shape mismatch: X{X.shape} Y{Y.shape} S{S_tilde.shape} A{A.shape}")
    B1 = np.flatnonzero(Y.sum(axis=1) > 0)
    if B1.size == 0:
        raise NoAnnotationsError("video has no point annotations; skip mining")
    k = cfg.scope(T)

    _, g = foreground_similarity(X, B1)
    A_ref = refine_attention(A, g)
    M = topk_foreground_mask(A_ref, k)
    Z, present = class_prototypes(X, Y)
    W = class_weights(X, Z, present, cfg.weighting)
    S2 = refine_tcam(S_tilde, M, W)
    S2 = temporal_prune(S2, S_tilde)
    fg = foreground_labels(S2, cfg.theta)
    if C > 1:
        top2 = np.sort(S2, axis=1)[:, -2:]
        if np.any((top2[:, 0] == top2[:, 1]) & (top2[:, 1] > cfg.theta)):
            logger.debug("argmax tie broken toward the lower class index")

    fg[B1] = Y[B1]  # point-labeled snippets take exactly their annotated class
    is_fg = fg.sum(axis=1) > 0
    bkg = background_labels(A, k, exclude=is_fg)

    Y_hat = np.concatenate([fg, bkg[:, None]], axis=1)
    from_point = np.zeros_like(Y_hat, dtype=bool)
    from_point[B1, :C] = Y[B1] > 0
    mined = (Y_hat > 0) & ~from_point
    return PseudoLabelMatrix(Y_hat=Y_hat, from_point=from_point, mined=mined, coarse_mask=M)
