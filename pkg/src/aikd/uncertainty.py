"""Prediction uncertainty on old classes and the uncertainty-regularized classification loss."""

from __future__ import annotations

import torch
import torch.nn.functional as F

U_MIN, U_MAX = 1e-6, 1e6


def logit_divergence(g_old: torch.Tensor, g_new: torch.Tensor, kind: str = "kl",
                     temperature: float = 1.0) -> torch.Tensor:
    """Per-sample divergence between old logits and the new model's old-class logits.

    ``kl`` is KL(p_old || p_new); ``cross_entropy`` is H(p_old, p_new). Both
    tensors must already be restricted to the same old classes, same order.
    """
    if g_old.shape != g_new.shape:
        raise ValueError(f"logit shapes differ: {tuple(g_old.shape)} vs {tuple(g_new.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    log_p_old = F.log_softmax(g_old / temperature, dim=1)
    log_p_new = F.log_softmax(g_new / temperature, dim=1)
    p_old = log_p_old.exp()
    if kind == "kl":
        return (p_old * (log_p_old - log_p_new)).sum(1)
    if kind == "cross_entropy":
        return -(p_old * log_p_new).sum(1)
    raise ValueError(f"unknown divergence {kind!r}")


def prediction_uncertainty(g_old, g_new, kind: str = "kl", temperature: float = 1.0) -> torch.Tensor:
    return torch.exp(logit_divergence(g_old, g_new, kind, temperature))


def uncertainty_regularized_loss(ce: torch.Tensor, u: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """``ce / u + log u`` per sample, with u clamped to a safe range."""
    if ce.shape != u.shape:
        raise ValueError("ce and u must be aligned per sample")
    if (u <= 0).any() or not torch.isfinite(u).all():
        raise FloatingPointError("uncertainty must be positive and finite")
    u = u.clamp(U_MIN, U_MAX)
    loss = ce / u + torch.log(u)
    return loss.mean() if reduction == "mean" else loss


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-sample cross-entropy against label distributions (rows of ``targets``)."""
    return -(targets * F.log_softmax(logits, dim=1)).sum(1)
