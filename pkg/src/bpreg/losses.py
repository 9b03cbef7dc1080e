"""Order and distance losses over batches of slice scores.

All losses act on a (B, m) score array from one update step, where row i
holds the scores of m equidistant slices of volume i, bottom to top, and
delta_h[i] is the physical distance between consecutive slices in mm.
They are differentiable torch functions; numpy inputs are converted.
"""

import warnings

import numpy as np
import torch
import torch.nn.functional as F

LOSS_KINDS = ("heuristic", "classification", "none")


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def sigmoid(x):
    """Logistic function 1 / (1 + exp(-x)), overflow-safe for large |x|."""
    return torch.sigmoid(_as_tensor(x))


def score_deltas(scores):
    """Consecutive score differences s[:, j+1] - s[:, j]."""
    scores = _as_tensor(scores)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError(f"expected a (B, m>=2) score array, got shape {tuple(scores.shape)}")
    return scores[:, 1:] - scores[:, :-1]


def heuristic_order_loss(scores, delta_h, beta):
    """Squared gap between the distance-derived and the score-derived
    ordering probabilities, averaged over all B(m-1) slice pairs.

    Vanishes exactly when every score difference equals beta * delta_h,
    so beta is the enforced score-per-mm slope; bounded by 1.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    ds = score_deltas(scores)
    delta_h = _as_tensor(delta_h).to(ds.dtype).reshape(-1, 1)
    target = torch.sigmoid(beta * delta_h)
    return ((target - torch.sigmoid(ds)) ** 2).mean()


def classification_order_loss(scores):
    """Stabilized negative log-likelihood of the observed slice ordering.

    Pairs whose sigmoid underflows to exactly zero in the working
    precision are excluded and the sum is renormalized by the count of
    surviving pairs; when nothing survives the loss is zero and a
    RuntimeWarning is emitted.  The result is finite by construction.
    """
    ds = score_deltas(scores)
    included = torch.sigmoid(ds.detach()) > 0
    n_star = int(included.sum())
    if n_star == 0:
        warnings.warn("classification order loss: all pairs underflowed, returning 0", RuntimeWarning)
        return (ds * 0).sum()  # zero, but still attached to the graph
    log_sig = -F.softplus(-ds)  # log sigmoid, stable for large negative ds
    return -log_sig[included].sum() / n_star


def smooth_l1(x):
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    x = _as_tensor(x)
    absx = x.abs()
    return torch.where(absx < 1, 0.5 * x * x, absx - 0.5)


def distance_loss(scores):
    """Smooth-L1 penalty on the change between consecutive score gaps,
    averaged over all B(m-2) gap pairs.  Zero for per-volume linear scores."""
    ds = score_deltas(scores)
    if ds.shape[1] < 2:
        raise ValueError("distance loss needs m >= 3 slices per volume")
    return smooth_l1(ds[:, 1:] - ds[:, :-1]).mean()


def combined_loss(scores, delta_h, loss_kind, alpha, beta=None):
    """Order loss plus alpha times the distance loss.

    alpha = 0 skips the distance term entirely (so m = 2 stays legal);
    loss_kind 'none' drops the order term and requires alpha > 0.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")

    if loss_kind == "heuristic":
        loss = heuristic_order_loss(scores, delta_h, beta)
    elif loss_kind == "classification":
        loss = classification_order_loss(scores)
    else:
        if alpha == 0:
            raise ValueError("loss_kind 'none' with alpha=0 leaves no loss at all")
        loss = torch.zeros((), dtype=_as_tensor(scores).dtype)

    if alpha > 0:
        loss = loss + alpha * distance_loss(scores)
    return loss
