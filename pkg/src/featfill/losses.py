"""Training objectives and their exact gradients w.r.t. network outputs.

All functions accept a single sample (1-d arrays) or a batch (2-d arrays,
one row per sample) and return per-sample values; batch reduction is the
caller's arithmetic mean. Gradients are of the *per-sample* values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOSS_KINDS = ("l2", "disc", "l2_plus_disc")


@dataclass
class LossConfig:
    """Objective switches: smoothing eps, the log-variance weight lam
    (``None`` means 1/dim, resolved at the use site), which terms to
    combine, and whether the variance weighting is applied at all."""

    label_smoothing_eps: float = 0.1
    lam: float | None = None
    loss_kind: str = "l2_plus_disc"
    uncertainty: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.label_smoothing_eps < 1.0:
            raise ValueError("label_smoothing_eps must be in [0, 1)")
        if self.lam is not None and self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")

    def resolved_lam(self, dim: int) -> float:
        return float(self.lam) if self.lam is not None else 1.0 / dim


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"expected 1-d or 2-d array, got shape {x.shape}")


def _squeeze(value, grads, single):
    if single:
        return value[0], *(g[0] for g in grads)
    return value, *grads


def loss_l2(h_out, new_feat):
    """Squared distance ||new - h||^2 and its gradient 2(h - new)."""
    h, single = _as_batch(h_out)
    t, t_single = _as_batch(new_feat)
    if h.shape != t.shape or single != t_single:
        raise ValueError(f"shape mismatch: {np.shape(h_out)} vs {np.shape(new_feat)}")
    diff = h - t
    value = np.einsum("ij,ij->i", diff, diff)
    return _squeeze(value, (2.0 * diff,), single)


def loss_disc(logits, label, eps: float = 0.0):
    """Label-smoothed softmax cross entropy.

    The target puts 1-eps on the label plus eps/k uniform mass. The
    log-sum-exp is computed with max subtraction, so logits of magnitude
    1e4 stay finite.
    """
    z, single = _as_batch(logits)
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    k = z.shape[1]
    if y.shape != (z.shape[0],):
        raise ValueError("one label per logits row required")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label out of range [0, {k})")
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    rows = np.arange(z.shape[0])
    # -sum(target * logp) with target = (1-eps)*onehot + eps/k
    value = -(1.0 - eps) * logp[rows, y] - (eps / k) * logp.sum(axis=1)
    grad = np.exp(logp)
    grad += -eps / k
    grad[rows, y] -= 1.0 - eps
    return _squeeze(value, (grad,), single)


def loss_combined(h_out, new_feat, logits, label, cfg: LossConfig):
    """Sum of the pairwise and discriminative terms with unit weights.

    Returns per-sample values plus the gradient w.r.t. ``h_out`` from the
    l2 term and the gradient w.r.t. ``logits`` from the discriminative
    term; the caller routes the logits gradient through the (frozen)
    classifier head to reach ``h_out``. ``cfg.loss_kind`` drops either
    term for ablations.
    """
    cfg.validate()
    v_l2, g_h = loss_l2(h_out, new_feat)
    v_disc, g_logits = loss_disc(logits, label, cfg.label_smoothing_eps)
    if cfg.loss_kind == "l2":
        return v_l2, g_h, np.zeros_like(g_logits)
    if cfg.loss_kind == "disc":
        return v_disc, np.zeros_like(g_h), g_logits
    return v_l2 + v_disc, g_h, g_logits


def loss_uncertain(base_loss_value, s, lam: float):
    """Variance-weighted objective exp(-s)*base + s/lam, s = log sigma^2.

    Gradients: d/dbase = exp(-s); d/ds = -exp(-s)*base + 1/lam. The s
    stationary point sits at sigma^2 = lam * base, which is what makes the
    learned variance track the per-sample loss.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    base = np.asarray(base_loss_value, dtype=np.float64)
    s_arr = np.asarray(s, dtype=np.float64)
    if base.shape != s_arr.shape:
        raise ValueError("base and s must have the same shape")
    w = np.exp(-s_arr)
    value = w * base + s_arr / lam
    grad_base = w
    grad_s = -w * base + 1.0 / lam
    if base.ndim == 0:
        return float(value), float(grad_base), float(grad_s)
    return value, grad_base, grad_s
