"""Memory banks and the NCE-based multi-view contrastive loss.

Each peer owns a :class:`MemoryBank` holding one unit embedding per training
instance. For a pair of peers ``(a, b)`` the direction ``a -> b`` scores the
live embedding of ``a`` against the matching embedding of ``b`` (positive)
and ``K`` label-filtered slots of ``b``'s bank (negatives), and turns the
scores into a binary NCE objective with uniform noise ``1/N``.

The bank is never differentiated: scores against stored slots only carry
gradient into the anchor.
"""
import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import kernels
from .errors import InvalidInputError, NoNegativesError

EPS = 1e-12

DEFAULT_TAU = 0.1
DEFAULT_K = 256
DEFAULT_DIM = 128
DEFAULT_RHO = 0.5


class MemoryBank:
    """Per-peer store of unit embeddings, one row per training instance.

    ``slots`` is an ``(N, d)`` array updated in place; ``labels`` is frozen at
    construction. ``z`` holds the normalizing-constant estimate once set.
    """

    def __init__(self, slots, labels, rho=DEFAULT_RHO, z=None):
        slots = np.ascontiguousarray(slots)
        labels = np.array(labels, dtype=np.int64)
        if slots.ndim != 2 or slots.shape[0] != labels.shape[0]:
            raise InvalidInputError("slots must be (N, d) with one label per row")
        if not 0.0 <= rho <= 1.0:
            raise InvalidInputError(f"momentum rho must be in [0, 1], got {rho}")
        labels.setflags(write=False)
        self.slots = slots
        self.labels = labels
        self.rho = float(rho)
        self.z = z
        # slots grouped by label, for sampling "any label but y" in O(1)
        self._order = np.argsort(labels, kind="stable")
        classes, starts, counts = np.unique(labels[self._order], return_index=True, return_counts=True)
        self._class_start = dict(zip(classes.tolist(), starts.tolist()))
        self._class_count = dict(zip(classes.tolist(), counts.tolist()))

    @property
    def size(self):
        return self.slots.shape[0]

    @property
    def dim(self):
        return self.slots.shape[1]

    def __len__(self):
        return self.size

    def state_dict(self):
        return {
            "slots": self.slots.copy(),
            "labels": np.array(self.labels),
            "rho": self.rho,
            "z": self.z,
        }

    @classmethod
    def from_state_dict(cls, state):
        return cls(state["slots"], state["labels"], rho=state["rho"], z=state["z"])


def bank_init(N, d, labels, seed, rho=DEFAULT_RHO, dtype=np.float32):
    """A bank of ``N`` random unit vectors of dimension ``d``."""
    if N < 2 or d < 1:
        raise InvalidInputError(f"need N >= 2 and d >= 1, got N={N}, d={d}")
    rng = np.random.default_rng(seed)
    slots = rng.standard_normal((N, d))
    slots /= np.linalg.norm(slots, axis=1, keepdims=True)
    return MemoryBank(slots.astype(dtype), labels, rho=rho)


def bank_update(bank, index, v):
    """Blend ``v`` into the slot(s) at ``index`` and renormalize, in place.

    ``index`` may be a scalar with ``v`` of shape ``(d,)``, or an index array
    with ``v`` of shape ``(n, d)``. Returns the bank.
    """
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    idx = np.atleast_1d(np.asarray(index, dtype=np.int64))
    if idx.size and (idx.min() < 0 or idx.max() >= bank.size):
        raise InvalidInputError(f"bank index out of range [0, {bank.size})")
    values = np.atleast_2d(np.asarray(v, dtype=bank.slots.dtype))
    kernels.momentum_update(bank.slots, idx, values, bank.rho)
    return bank


# -- negative sampling -------------------------------------------------------

@dataclass
class NegativeSample:
    indices: np.ndarray
    embeddings: np.ndarray


def sample_negative_indices(bank, anchor_labels, K, rng):
    """Draw ``K`` slot indices per anchor, uniformly with replacement from the
    slots whose label differs from the anchor's.

    Returns an int64 array of shape ``(B, K)`` (``(K,)`` for a scalar label).
    """
    if K < 1:
        raise InvalidInputError(f"K must be at least 1, got {K}")
    scalar = np.ndim(anchor_labels) == 0
    labels = np.atleast_1d(np.asarray(anchor_labels, dtype=np.int64))
    starts = np.array([bank._class_start.get(y, 0) for y in labels.tolist()], dtype=np.int64)
    counts = np.array([bank._class_count.get(y, 0) for y in labels.tolist()], dtype=np.int64)
    eligible = bank.size - counts
    if (eligible < 1).any():
        bad = labels[eligible < 1][0]
        raise NoNegativesError(f"no bank slot has a label other than {bad}")
    u = rng.integers(0, eligible[:, None], size=(labels.shape[0], K), dtype=np.int64)
    # skip over the anchor class's contiguous block in label order
    u += np.where(u >= starts[:, None], counts[:, None], 0)
    idx = bank._order[u]
    return idx[0] if scalar else idx


def sample_negatives(bank, anchor_label, K, rng):
    idx = sample_negative_indices(bank, anchor_label, K, rng)
    return NegativeSample(idx, bank.slots[idx].copy())


def eligible_mask(bank, anchor_labels):
    """Boolean ``(B, N)`` mask of slots usable as negatives for each anchor."""
    labels = np.atleast_1d(np.asarray(anchor_labels, dtype=np.int64))
    return labels[:, None] != bank.labels[None, :]


# -- NCE pieces --------------------------------------------------------------

def match_probability(anchor, candidate, tau, z):
    """``exp(anchor . candidate / tau) / z``."""
    if not tau > 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    if not z > 0:
        raise InvalidInputError(f"z must be positive, got {z}")
    if isinstance(anchor, torch.Tensor) or isinstance(candidate, torch.Tensor):
        return torch.exp((torch.as_tensor(anchor) * torch.as_tensor(candidate)).sum(-1) / tau) / z
    return float(np.exp(np.dot(anchor, candidate) / tau) / z)


def nce_posterior(p_p, K, N):
    """Posterior that a candidate with match probability ``p_p`` is the
    positive, against ``K`` noise draws of density ``1/N``."""
    if K < 0 or N < 1:
        raise InvalidInputError(f"need K >= 0 and N >= 1, got K={K}, N={N}")
    denom = p_p + K / N
    if isinstance(denom, torch.Tensor):
        bad = bool((denom <= 0).any())
    else:
        bad = not np.all(np.asarray(denom) > 0)
    if bad:
        raise InvalidInputError("posterior denominator is zero")
    return p_p / denom


def nce_loss_from_posteriors(h_pos, h_neg):
    """``-log h_pos - sum_k log(1 - h_neg[k])`` with logs floored at ``EPS``."""
    h_pos = torch.as_tensor(h_pos, dtype=torch.float64)
    h_neg = torch.as_tensor(h_neg, dtype=torch.float64)
    return -(torch.log(h_pos.clamp_min(EPS)) + torch.log((1 - h_neg).clamp_min(EPS)).sum(-1))


def nce_loss_from_scores(pos_scores, neg_scores, tau, log_z, N, neg_mask=None):
    """Batch-mean NCE loss from raw dot products.

    ``pos_scores``: ``(B,)``; ``neg_scores``: ``(B, K)``; ``log_z``: scalar or
    ``(B,)``. With ``neg_mask`` (``(B, K)`` bool) only masked entries count
    as negatives and each anchor's ``K`` is its number of masked entries.

    Works in log space: ``log h = s - logaddexp(s, log(K/N))`` and
    ``log(1 - h) = log(K/N) - logaddexp(s, log(K/N))`` with
    ``s = score / tau - log z``, so neither term can overflow or hit log(0).
    """
    log_z = torch.as_tensor(log_z, dtype=pos_scores.dtype)
    if log_z.ndim == 1:
        log_z_neg = log_z[:, None]
    else:
        log_z_neg = log_z
    if neg_mask is None:
        K = neg_scores.shape[-1]
        log_noise = torch.full_like(pos_scores, math.log(K / N))
    else:
        mask = torch.as_tensor(neg_mask)
        counts = mask.sum(-1).to(pos_scores.dtype)
        if (counts < 1).any():
            raise NoNegativesError("an anchor has no eligible negatives")
        log_noise = torch.log(counts / N)
    s_pos = pos_scores / tau - log_z
    s_neg = neg_scores / tau - log_z_neg
    log_h_pos = s_pos - torch.logaddexp(s_pos, log_noise)
    log_1m_h_neg = log_noise[:, None] - torch.logaddexp(s_neg, log_noise[:, None])
    if neg_mask is not None:
        log_1m_h_neg = torch.where(mask, log_1m_h_neg, torch.zeros_like(log_1m_h_neg))
    return -(log_h_pos + log_1m_h_neg.sum(-1)).mean()


def directional_contrastive_loss(anchor, positive, negatives, tau, z, N):
    """NCE loss of one anchor (or a batch) against its positive and explicit
    negative embeddings.

    ``negatives`` is a :class:`NegativeSample` or an array of shape ``(K, d)``
    (single anchor) / ``(B, K, d)`` (batch).
    """
    if isinstance(negatives, NegativeSample):
        negatives = negatives.embeddings
    a = torch.as_tensor(anchor, dtype=torch.float64) if not isinstance(anchor, torch.Tensor) else anchor
    dtype = a.dtype
    p = torch.as_tensor(positive, dtype=dtype)
    n = torch.as_tensor(negatives, dtype=dtype)
    if n.shape[-2] < 1:
        raise InvalidInputError("at least one negative is required")
    single = a.ndim == 1
    if single:
        a, p, n = a[None], p[None], n[None]
    if not z > 0:
        raise InvalidInputError(f"z must be positive, got {z}")
    pos = (a * p).sum(-1)
    neg = torch.einsum("bd,bkd->bk", a, n)
    return nce_loss_from_scores(pos, neg, tau, math.log(z), N)


class _BankScores(torch.autograd.Function):
    """Dot products of anchors with indexed bank rows, via the bank kernels.

    Gradient flows into ``anchors`` only.
    """

    @staticmethod
    def forward(ctx, anchors, bank_slots, idx):
        out = kernels.gather_dot(anchors.detach().cpu().numpy(), bank_slots, idx)
        ctx.bank_slots = bank_slots
        ctx.idx = idx
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        g = kernels.gather_weighted_sum(grad_out.detach().cpu().numpy(), ctx.bank_slots, ctx.idx)
        return torch.from_numpy(g), None, None


def bank_scores(anchors, bank, idx):
    """``(B, K)`` tensor of ``anchors[b] . bank.slots[idx[b, k]]``."""
    if anchors.dtype != torch.from_numpy(bank.slots[:1]).dtype:
        raise InvalidInputError("anchor dtype does not match the bank dtype")
    return _BankScores.apply(anchors.contiguous(), bank.slots, np.ascontiguousarray(idx, dtype=np.int64))


def estimate_z(bank, anchors, tau, idx=None):
    """Constant normalizer ``N * mean(exp(score / tau))``, frozen on first use.

    Scores are over all ``(anchor, slot)`` pairs, or only those in ``idx``
    (``(B, K)`` sampled indices). Later calls return the stored value.
    """
    if bank.z is not None:
        return bank.z
    a = anchors.detach().cpu().numpy() if isinstance(anchors, torch.Tensor) else np.asarray(anchors)
    a = np.atleast_2d(a).astype(bank.slots.dtype)
    if idx is None:
        scores = a.astype(np.float64) @ bank.slots.T.astype(np.float64)
    else:
        scores = kernels.gather_dot(a, bank.slots, idx).astype(np.float64)
    bank.z = float(bank.size * np.mean(np.exp(scores / tau)))
    return bank.z


def exact_log_z(anchors, bank, tau):
    """Per-anchor ``log sum_n exp(anchor . slot_n / tau)`` over the full bank."""
    slots = torch.from_numpy(bank.slots).to(anchors.dtype)
    return torch.logsumexp(anchors @ slots.T / tau, dim=-1)


# -- multi-view aggregation --------------------------------------------------

@dataclass(frozen=True)
class ContrastiveSettings:
    """How the contrastive term is evaluated.

    ``positive``: "live" uses the other peer's current embedding, "bank" the
    stored slot at the instance index. ``exact_z`` computes the per-anchor
    normalizer over the whole bank instead of the frozen estimate;
    ``full_enumeration`` uses every eligible slot as a negative instead of
    ``K`` samples. The last two exist for verification on small banks.
    """

    tau: float = DEFAULT_TAU
    K: int = DEFAULT_K
    positive: str = "live"
    exact_z: bool = False
    full_enumeration: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidInputError(f"tau must be positive, got {self.tau}")
        if self.K < 1:
            raise InvalidInputError(f"K must be at least 1, got {self.K}")
        if self.positive not in ("live", "bank"):
            raise InvalidInputError(f"positive must be 'live' or 'bank', got {self.positive!r}")


def directional_bank_loss(anchors, positives, bank, labels, settings, neg_idx=None, indices=None):
    """Batch-mean loss of ``anchors`` contrasted against ``bank``.

    ``positives`` is the live positive embedding batch; when ``None`` the bank
    slots at ``indices`` are used. ``neg_idx`` holds the sampled negatives
    (ignored under full enumeration).
    """
    N = bank.size
    if positives is None:
        pos = bank_scores(anchors, bank, np.asarray(indices, dtype=np.int64)[:, None])[:, 0]
    else:
        pos = (anchors * positives).sum(-1)
    if settings.full_enumeration:
        all_idx = np.broadcast_to(np.arange(N, dtype=np.int64), (anchors.shape[0], N))
        neg = bank_scores(anchors, bank, all_idx)
        mask = torch.from_numpy(eligible_mask(bank, labels))
    else:
        neg = bank_scores(anchors, bank, neg_idx)
        mask = None
    if settings.exact_z:
        log_z = exact_log_z(anchors, bank, settings.tau)
    else:
        if bank.z is None:
            raise InvalidInputError("bank normalizer not estimated; call estimate_z first")
        log_z = math.log(bank.z)
    return nce_loss_from_scores(pos, neg, settings.tau, log_z, N, neg_mask=mask)


def _prepare(embeddings, banks, labels, settings, rng, negatives):
    """Sample negatives per direction and estimate any unset normalizers."""
    M = len(embeddings)
    directions = [(a, b) for a in range(M) for b in range(M) if a != b]
    neg_idx = {}
    if not settings.full_enumeration:
        for a, b in directions:
            if negatives is not None and (a, b) in negatives:
                neg_idx[a, b] = negatives[a, b]
            else:
                neg_idx[a, b] = sample_negative_indices(banks[b], labels, settings.K, rng)
    if not settings.exact_z:
        for b in range(M):
            if banks[b].z is not None:
                continue
            sources = [a for a in range(M) if a != b]
            anchors = torch.cat([embeddings[a].detach() for a in sources])
            idx = None
            if not settings.full_enumeration:
                idx = np.concatenate([neg_idx[a, b] for a in sources])
            estimate_z(banks[b], anchors, settings.tau, idx=idx)
    return neg_idx


def pairwise_loss(embeddings, banks, labels, indices, settings, a, b, neg_idx):
    """Symmetric loss between peers ``a`` and ``b``: ``a -> b`` plus ``b -> a``."""
    total = 0
    for src, dst in ((a, b), (b, a)):
        positives = embeddings[dst] if settings.positive == "live" else None
        total = total + directional_bank_loss(
            embeddings[src], positives, banks[dst], labels, settings,
            neg_idx=neg_idx.get((src, dst)), indices=indices,
        )
    return total


def pairwise_terms(embeddings, banks, labels, indices, settings, rng=None, negatives=None):
    """Dict mapping each unordered peer pair ``(a, b)``, ``a < b``, to its
    symmetric loss tensor.

    ``negatives`` optionally fixes the sampled indices per ordered direction
    ``(src, dst)``; missing directions are drawn from ``rng``.
    """
    M = len(embeddings)
    if M < 2:
        raise InvalidInputError("the contrastive term needs at least two peers")
    if len(banks) != M:
        raise InvalidInputError(f"{M} embedding batches but {len(banks)} banks")
    if rng is None:
        rng = np.random.default_rng()
    labels = np.asarray(labels, dtype=np.int64)
    neg_idx = _prepare(embeddings, banks, labels, settings, rng, negatives)
    return {
        (a, b): pairwise_loss(embeddings, banks, labels, indices, settings, a, b, neg_idx)
        for a, b in itertools.combinations(range(M), 2)
    }


def total_contrastive_loss(embeddings, banks, labels, indices, settings, rng=None, negatives=None):
    """Sum of the symmetric pairwise losses over all ``M choose 2`` peer pairs."""
    terms = pairwise_terms(embeddings, banks, labels, indices, settings, rng=rng, negatives=negatives)
    return sum(terms.values())
