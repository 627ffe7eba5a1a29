"""Independent oracles: brute-force contrastive evaluation, a from-scratch
recomputation of the whole objective, and finite-difference gradient checks.

The oracles are deliberately slow and simple (plain Python loops over
floats) and share no loss-evaluation code with :mod:`mcl_okd.losses` or
:mod:`mcl_okd.contrastive`.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import contrastive as C
from . import losses as L
from .errors import InvalidInputError, NoNegativesError

ORACLE_MAX_N = 1024

GRAD_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-6


def _dot(u, v):
    return math.fsum(x * y for x, y in zip(u, v))


def brute_force_contrastive(anchor, bank_slots, bank_labels, positive_index, anchor_label, tau, K=None):
    """Directional NCE loss with the exact per-anchor normalizer.

    ``Z = sum_n exp(anchor . slot_n / tau)`` over the whole bank; the
    negative term is ``K`` times the exact average of ``log(1 - h)`` over
    every slot whose label differs from ``anchor_label`` (``K`` defaults to
    the number of such slots, making it a plain sum).
    """
    N = len(bank_slots)
    if N > ORACLE_MAX_N:
        raise InvalidInputError(f"oracle refuses banks larger than {ORACLE_MAX_N} (got {N})")
    a = [float(x) for x in anchor]
    rows = [[float(x) for x in row] for row in bank_slots]
    weights = [math.exp(_dot(a, row) / tau) for row in rows]
    Z = math.fsum(weights)
    eligible = [j for j in range(N) if int(bank_labels[j]) != int(anchor_label)]
    if not eligible:
        raise NoNegativesError("no slot with a different label")
    if K is None:
        K = len(eligible)
    noise = K * (1.0 / N)

    def posterior(j):
        p = weights[j] / Z
        return p / (p + noise)

    loss = -math.log(posterior(positive_index))
    loss -= K * math.fsum(math.log(1.0 - posterior(j)) for j in eligible) / len(eligible)
    return loss


def _log_softmax_row(z, T=1.0):
    scaled = [x / T for x in z]
    m = max(scaled)
    lse = m + math.log(math.fsum(math.exp(x - m) for x in scaled))
    return [x - lse for x in scaled]


def recompute_objective(logits, embeddings, labels, banks, negatives, T, beta, tau, use_kl=True):
    """Objective of one batch recomputed from raw numbers.

    ``logits``/``embeddings``: per-peer ``(B, C)``/``(B, d)`` arrays;
    ``banks``: per-peer ``(slots, z)`` pairs (the pre-step snapshot);
    ``negatives``: dict ``(src, dst) -> (B, K)`` index arrays. Positives are
    the other peer's live embedding. Returns a dict with ``ce``, ``kl``,
    ``contrastive`` and ``total``.
    """
    M = len(logits)
    B = len(labels)
    ce = 0.0
    for m in range(M):
        rows = [_log_softmax_row([float(x) for x in logits[m][i]]) for i in range(B)]
        ce += -math.fsum(rows[i][int(labels[i])] for i in range(B)) / B
    kl = 0.0
    if use_kl and M >= 2:
        total_kl = []
        for i in range(B):
            mean = [math.fsum(float(logits[m][i][c]) for m in range(M)) / M for c in range(len(logits[0][i]))]
            log_p = _log_softmax_row(mean, T)
            log_q = _log_softmax_row([float(x) for x in logits[-1][i]], T)
            total_kl.append(math.fsum(math.exp(lp) * (lp - lq) for lp, lq in zip(log_p, log_q)))
        kl = math.fsum(total_kl) / B
    contrast = 0.0
    if beta > 0 and M >= 2:
        for a in range(M):
            for b in range(a + 1, M):
                for src, dst in ((a, b), (b, a)):
                    slots, z = banks[dst]
                    N = len(slots)
                    per_anchor = []
                    for i in range(B):
                        anchor = [float(x) for x in embeddings[src][i]]
                        idx = negatives[src, dst][i]
                        noise = len(idx) / N

                        def h(vec):
                            p = math.exp(_dot(anchor, vec) / tau) / z
                            return p / (p + noise)

                        term = -math.log(h(embeddings[dst][i]))
                        term -= math.fsum(math.log(1.0 - h(slots[j])) for j in idx)
                        per_anchor.append(term)
                    contrast += math.fsum(per_anchor) / B
    total = ce + T * T * kl + beta * contrast
    return {"ce": ce, "kl": kl, "contrastive": contrast, "total": total}


# -- finite differences ------------------------------------------------------

def numerical_gradient(fn, inputs, eps=1e-6):
    """Central-difference gradient of scalar ``fn(*inputs)`` w.r.t. each input."""
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                x_plus = flat[i].item()
                f_plus = float(fn(*inputs))
                flat[i] = orig - eps
                x_minus = flat[i].item()
                f_minus = float(fn(*inputs))
                flat[i] = orig
                # divide by the step actually taken, not the nominal 2 * eps
                gflat[i] = (f_plus - f_minus) / (x_plus - x_minus)
            grads.append(g)
    return grads


def relative_error(analytic, numeric, floor=1e-8):
    """Max over coordinates of ``|a - n| / max(|a|, |n|, floor)``."""
    a = torch.cat([t.reshape(-1) for t in analytic]).double()
    n = torch.cat([t.reshape(-1) for t in numeric]).double()
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0


def grad_check(fn, inputs, eps=1e-6, floor=1e-8):
    """Max relative error between autograd and central differences.

    ``inputs`` are float64 tensors; they are perturbed in place and restored.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise InvalidInputError(f"eps should lie in [1e-6, 1e-4], got {eps}")
    if any(x.dtype != torch.float64 for x in inputs):
        raise InvalidInputError("gradient checks need float64 inputs")
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, analytic)]
    numeric = numerical_gradient(fn, [x.detach().clone() for x in inputs], eps)
    return relative_error(analytic, numeric, floor)


def grad_check_module(fn, module, eps=1e-6, floor=1e-8):
    """Like :func:`grad_check`, over every parameter of ``module``;
    ``fn()`` evaluates the scalar loss with the module's current weights."""
    params = [p for p in module.parameters() if p.requires_grad]
    if any(p.dtype != torch.float64 for p in params):
        raise InvalidInputError("gradient checks need a float64 module")
    analytic = torch.autograd.grad(fn(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    numeric = numerical_gradient(lambda *_: fn(), [p.data for p in params], eps)
    return relative_error(analytic, numeric, floor)


# -- the suite ---------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    kind: str        # "grad" or "oracle"
    value: float
    tolerance: float

    @property
    def passed(self):
        return math.isfinite(self.value) and self.value < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name:<32} {self.kind:<6} {self.value:.3e} < {self.tolerance:.0e}"


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _random_bank(rng, N, d, C_):
    labels = rng.integers(0, C_, size=N)
    labels[:C_] = np.arange(C_)  # every class present
    return C.MemoryBank(_unit_rows(rng, N, d), labels)


def oracle_equivalence(n_banks=50, N=32, d=16, num_classes=4, batch=4, tau=0.1, seed=0):
    """Max absolute difference between the production loss (exact normalizer,
    all eligible negatives, positive read from the bank) and the oracle."""
    rng = np.random.default_rng(seed)
    settings = C.ContrastiveSettings(tau=tau, K=1, positive="bank", exact_z=True, full_enumeration=True)
    worst = 0.0
    for _ in range(n_banks):
        bank = _random_bank(rng, N, d, num_classes)
        idx = rng.choice(N, size=batch, replace=False)
        labels = bank.labels[idx]
        anchors = _unit_rows(rng, batch, d)
        prod = C.directional_bank_loss(torch.from_numpy(anchors), None, bank, labels, settings, indices=idx).item()
        ref = math.fsum(
            brute_force_contrastive(anchors[i], bank.slots, bank.labels, idx[i], labels[i], tau) for i in range(batch)
        ) / batch
        worst = max(worst, abs(prod - ref))
    return worst


def _grad_cases(seed=0):
    rng = np.random.default_rng(seed)
    t = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float64))
    cases = {}

    w = t(rng.standard_normal(6))
    cases["linear"] = (lambda x: (w * x).sum(), [t(rng.standard_normal(6))])

    labels = rng.integers(0, 5, size=4)
    cases["softmax_cross_entropy"] = (
        lambda z: L.cross_entropy(L.softmax(z), labels), [t(rng.standard_normal((4, 5)))])
    cases["cross_entropy_from_logits"] = (
        lambda z: L.cross_entropy_from_logits(z, labels), [t(rng.standard_normal((4, 5)))])

    # the student's own contribution to the ensemble is held at a constant too
    teacher = [t(rng.standard_normal((4, 5))) for _ in range(4)]
    cases["kl_student_teacher_fixed"] = (
        lambda z: L.kl_from_logits(teacher, z, T=3.0, detach_teacher=True),
        [t(rng.standard_normal((4, 5)))],
    )
    cases["kl_through_ensemble"] = (
        lambda z1, z2, z3: L.kl_from_logits([z1, z2, z3], z3, T=3.0, detach_teacher=False),
        [t(rng.standard_normal((4, 5))) for _ in range(3)],
    )
    p_t = L.softmax(t(rng.standard_normal(5)), 3.0)
    cases["kl_divergence_probs"] = (
        lambda z: L.kl_divergence(p_t, L.softmax(z, 3.0)), [t(rng.standard_normal(5))])

    N, d, K, B = 40, 8, 6, 3
    bank = _random_bank(rng, N, d, 4)
    bank.z = float(N * np.exp(rng.uniform(0, 1)))
    negs = bank.slots[rng.integers(0, N, size=K)]
    pos = _unit_rows(rng, 1, d)[0]
    cases["directional_anchor"] = (
        lambda a: C.directional_contrastive_loss(a, t(pos), t(negs), 0.1, bank.z, N),
        [t(_unit_rows(rng, 1, d)[0])],
    )
    labels_b = bank.labels[:B]
    neg_idx = C.sample_negative_indices(bank, labels_b, K, rng)
    settings = C.ContrastiveSettings(tau=0.1, K=K)
    cases["bank_kernel_anchor"] = (
        lambda a, p: C.directional_bank_loss(a, p, bank, labels_b, settings, neg_idx=neg_idx),
        [t(_unit_rows(rng, B, d)), t(_unit_rows(rng, B, d))],
    )
    exact = C.ContrastiveSettings(tau=0.1, K=1, positive="bank", exact_z=True, full_enumeration=True)
    cases["exact_z_full_enumeration"] = (
        lambda a: C.directional_bank_loss(a, None, bank, labels_b, exact, indices=np.arange(B)),
        [t(_unit_rows(rng, B, d))],
    )
    M = 3
    banks = [_random_bank(np.random.default_rng([seed, m]), N, d, 4) for m in range(M)]
    for b in banks:
        b.z = float(N)
    fixed = {(a, b): C.sample_negative_indices(banks[b], labels_b, K, rng) for a in range(M) for b in range(M) if a != b}
    cases["total_contrastive_live"] = (
        lambda *e: C.total_contrastive_loss(list(e), banks, labels_b, np.arange(B), settings, negatives=fixed),
        [t(_unit_rows(rng, B, d)) for _ in range(M)],
    )
    return cases


def tiny_objective(seed=0):
    """Scalar closure of the full objective on a tiny float64 graph (M=2,
    C=3, d=8) with fixed negatives and frozen normalizers; returns
    ``(fn, graph)``. The teacher is not detached so that the objective is a
    true function of the parameters."""
    from .config import TrainConfig
    from .trainer import compute_objective, init_state

    cfg = TrainConfig(
        M=2, synth_num_classes=3, d=8, widths=(2, 3, 4), depths=(1, 1, 1), synth_resolution=8,
        K=5, dtype="float64", kl_detach=False, seed=seed,
    )
    rng = np.random.default_rng(seed)
    N, B = 24, 4
    labels_all = np.arange(N) % 3
    state = init_state(cfg, labels_all)
    graph, banks = state.graph, state.banks
    for b in banks:
        b.z = float(N)
    idx = rng.choice(N, size=B, replace=False)
    labels = labels_all[idx]
    images = torch.from_numpy(rng.standard_normal((B, 3, 8, 8)))
    negatives = {(a, b): C.sample_negative_indices(banks[b], labels, cfg.K, rng) for a, b in ((0, 1), (1, 0))}
    batch = (torch.from_numpy(idx), images, torch.from_numpy(labels))
    graph.train()

    def fn():
        return compute_objective(graph, banks, batch, cfg, negatives=negatives)[0]

    return fn, graph


def run_checks(grad_tolerance=GRAD_TOLERANCE, oracle_tolerance=ORACLE_TOLERANCE, seed=0, eps=1e-6):
    """Run the oracle-equivalence and gradient checks; returns a list of
    :class:`CheckResult`."""
    results = [CheckResult("oracle_equivalence_N32", "oracle", oracle_equivalence(seed=seed), oracle_tolerance)]
    for name, (fn, inputs) in _grad_cases(seed).items():
        results.append(CheckResult(name, "grad", grad_check(fn, inputs, eps=eps), grad_tolerance))
    fn, graph = tiny_objective(seed)
    results.append(CheckResult("full_objective_tiny_graph", "grad", grad_check_module(fn, graph, eps=eps), grad_tolerance))
    return results
