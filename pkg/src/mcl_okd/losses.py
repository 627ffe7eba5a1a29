"""Classification and distillation losses.

Every function accepts a single vector (shape ``(C,)``) or a batch
(shape ``(B, C)``); batched losses are averaged over instances. Inputs that
are not tensors are converted to float64 tensors.
"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInputError

EPS = 1e-12

DEFAULT_T = 3.0
DEFAULT_BETA = 0.025


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_finite(x, name):
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{name} contains non-finite values")


def _check_temperature(temperature):
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")


def softmax(logits, temperature=1.0):
    """Temperature-scaled softmax over the last axis (max-shifted)."""
    z = _as_tensor(logits)
    _check_temperature(temperature)
    _check_finite(z, "logits")
    return F.softmax(z / temperature, dim=-1)


def log_softmax(logits, temperature=1.0):
    z = _as_tensor(logits)
    _check_temperature(temperature)
    _check_finite(z, "logits")
    return F.log_softmax(z / temperature, dim=-1)


def _labels(labels, probs):
    labels = torch.as_tensor(labels, dtype=torch.long)
    C = probs.shape[-1]
    if ((labels < 0) | (labels >= C)).any():
        raise InvalidInputError(f"label outside [0, {C})")
    return labels


def cross_entropy(probs, labels):
    """``-log probs[label]`` with the probability floored at ``EPS``."""
    p = _as_tensor(probs)
    y = _labels(labels, p)
    picked = p.gather(-1, y.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(EPS)).mean()


def cross_entropy_from_logits(logits, labels):
    """Same value as ``cross_entropy(softmax(logits), labels)`` without going
    through probabilities, so it cannot saturate at the floor."""
    z = _as_tensor(logits)
    y = _labels(labels, z)
    return -log_softmax(z).gather(-1, y.unsqueeze(-1)).squeeze(-1).mean()


def ensemble_soft_targets(all_logits, T=DEFAULT_T):
    """Softened distribution of the mean of the peers' logits."""
    if len(all_logits) == 0:
        raise InvalidInputError("ensemble needs at least one set of logits")
    stacked = torch.stack([_as_tensor(z) for z in all_logits])
    return softmax(stacked.mean(dim=0), T)


def ensemble_log_targets(all_logits, T=DEFAULT_T):
    if len(all_logits) == 0:
        raise InvalidInputError("ensemble needs at least one set of logits")
    stacked = torch.stack([_as_tensor(z) for z in all_logits])
    return log_softmax(stacked.mean(dim=0), T)


def kl_divergence(teacher, student):
    """``sum_c teacher_c * log(teacher_c / student_c)``.

    Zero-probability teacher entries contribute nothing; zero student entries
    are floored at the smallest normal float, and ``KL(p, p)`` is exactly 0.
    Gradients flow into ``teacher`` only if the caller does not detach it.
    """
    p = _as_tensor(teacher)
    q = _as_tensor(student)
    if p.shape != q.shape:
        raise InvalidInputError(f"distribution shapes differ: {tuple(p.shape)} vs {tuple(q.shape)}")
    tiny = torch.finfo(q.dtype).tiny
    log_ratio = torch.log(p.clamp_min(tiny)) - torch.log(q.clamp_min(tiny))
    terms = torch.where(p > 0, p * log_ratio, torch.zeros_like(p))
    # identical rows cancel exactly; rounding can leave tiny negative sums
    return terms.sum(-1).clamp_min(0.0).mean()


def kl_from_logits(teacher_logits, student_logits, T=DEFAULT_T, detach_teacher=True):
    """KL between the softened ensemble of ``teacher_logits`` (a list) and the
    softened ``student_logits``, computed in log space."""
    log_p = ensemble_log_targets(teacher_logits, T)
    if detach_teacher:
        log_p = log_p.detach()
    log_q = log_softmax(student_logits, T)
    return (log_p.exp() * (log_p - log_q)).sum(-1).clamp_min(0.0).mean()


@dataclass(frozen=True)
class LossBundle:
    ce: float
    kl: float
    contrastive: float
    total: float
    T: float
    beta: float

    def as_dict(self):
        return {"ce": self.ce, "kl": self.kl, "contrastive": self.contrastive, "total": self.total}


def weighted_total(ce, kl, contrastive, T=DEFAULT_T, beta=DEFAULT_BETA):
    """The overall objective; works on tensors (keeps the graph) and floats."""
    return ce + T * T * kl + beta * contrastive


def combine(ce, kl, contrastive, T=DEFAULT_T, beta=DEFAULT_BETA):
    if not T > 0:
        raise InvalidInputError(f"T must be positive, got {T}")
    if beta < 0:
        raise InvalidInputError(f"beta must be non-negative, got {beta}")
    ce, kl, contrastive = float(ce), float(kl), float(contrastive)
    return LossBundle(ce, kl, contrastive, weighted_total(ce, kl, contrastive, T, beta), T, beta)
