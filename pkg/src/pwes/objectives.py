"""Training losses. All functions take torch tensors and return differentiable scalars."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigurationError

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda4: float = 1.0
    lambda5: float = 0.8

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be a finite nonnegative number, got {v}")


COMPONENTS = ("mil1", "mil2", "scl", "fcl", "gui", "sps", "aml")


def _clamp(p):
    return p.clamp(EPS, 1.0 - EPS)


def _t(x, like=None):
    dtype = like.dtype if like is not None else torch.get_default_dtype()
    return torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=dtype)


def mil_loss_full(p1, y_v):
    y = _t(y_v, p1)
    return -(y * torch.log(_clamp(p1))).sum()


def mil_loss_fg(p2, y_v_fg):
    y = _t(y_v_fg, p2)
    return -(y * torch.log(_clamp(p2))).sum()


def combined_labels(Y, Y_hat) -> tuple[np.ndarray, np.ndarray]:
    """Union of point and pseudo labels, and the mask of rows holding any label."""
    Yt = ((np.asarray(Y) + np.asarray(Y_hat)) > 0).astype(np.int64)
    return Yt, Yt.sum(axis=1) > 0


def snippet_cls_loss(S_cat, Y_tilde, valid=None):
    """Focal-style snippet loss averaged over the labeled rows; 0 when no row is labeled."""
    Y_tilde = np.asarray(Y_tilde)
    if valid is None:
        valid = Y_tilde.sum(axis=1) > 0
    rows = np.flatnonzero(valid)
    if rows.size == 0:
        return S_cat.sum() * 0.0
    idx = torch.as_tensor(rows)
    s = _clamp(S_cat[idx])
    y = _t(Y_tilde[rows], S_cat)
    term = y * (1 - s) ** 2 * torch.log(s) + (1 - y) * s ** 2 * torch.log(1 - s)
    return -term.sum() / rows.size


def _normalize(v):
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def info_nce(anchors, positives, negatives, tau: float = 1.0):
    """InfoNCE over a set of anchors sharing one positive and one negative set.

    Returns (loss summed over anchors, number of anchors used). Vectors are
    L2-normalized before the dot products.
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    if anchors is None or anchors.shape[0] == 0 or len(positives) == 0:
        return None, 0
    u = _normalize(anchors)
    P = _normalize(_t(positives, anchors))
    logits_p = u @ P.T / tau
    if len(negatives):
        N = _normalize(_t(negatives, anchors))
        logits_all = torch.cat([logits_p, u @ N.T / tau], dim=1)
    else:
        logits_all = logits_p
    per_anchor = torch.logsumexp(logits_all, dim=1) - torch.logsumexp(logits_p, dim=1)
    return per_anchor.sum(), anchors.shape[0]


def contrastive_loss(q, bank, video_id=None, tau: float = 1.0):
    """Mean InfoNCE over this video's foreground region vectors against the bank.

    Anchors whose positive set is empty are skipped; returns (loss, skipped)
    with loss 0 and skipped=True when no anchor has positives.
    """
    total, count = None, 0
    for c, vecs in enumerate(q.vectors[:-1]):
        if vecs is None:
            continue
        P, N = bank.contrastive_sets(c, exclude=video_id)
        part, n = info_nce(vecs, P, N, tau)
        if n:
            total = part if total is None else total + part
            count += n
    if count == 0:
        if tau <= 0:
            raise ConfigurationError(f"temperature must be positive, got {tau}")
        return torch.zeros(()), True
    return total / count, False


def guide_loss(A, S):
    return (A - (1.0 - S[:, -1])).abs().mean()


def sparsity_loss(A_r, A_f):
    return 0.5 * (A_r.mean() + A_f.mean())


def mutual_loss(A_r, A_f, targets=None):
    """Symmetric mutual learning: each modality regresses onto the other, held constant.

    ``targets`` optionally supplies the (A_r, A_f) values used as the constant
    side; by default they are the detached inputs.
    """
    t_r, t_f = targets if targets is not None else (A_r.detach(), A_f.detach())
    return 0.5 * ((A_r - t_f) ** 2).mean() + 0.5 * ((A_f - t_r) ** 2).mean()


def joint_loss(components: dict, w: LossWeights = LossWeights()):
    def get(name):
        v = components.get(name)
        return 0.0 if v is None else v

    return (w.lambda1 * (get("mil1") + get("mil2")) + w.lambda2 * get("scl") + w.lambda3 * get("fcl")
            + w.lambda4 * get("gui") + w.lambda5 * get("sps") + get("aml"))
