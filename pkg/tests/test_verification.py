import math

import numpy as np
import pytest
import torch

from mcl_okd import contrastive as C
from mcl_okd import verification as V
from mcl_okd.errors import InvalidInputError, NoNegativesError


def test_oracle_two_slot_hand_value():
    # anchor (1,0); slot 0 = (1,0) positive, slot 1 = (0,1) the only negative; tau = 1.
    # p0 = e/(e+1), p1 = 1/(e+1), noise K/N = 1/2
    # h0 = 2e/(3e+1), 1 - h1 = (e+1)/(e+3)
    e = math.e
    expected = math.log((3 * e + 1) / (2 * e)) + math.log((e + 3) / (e + 1))
    assert expected == pytest.approx(0.9515428129, abs=1e-10)
    got = V.brute_force_contrastive([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], [0, 1], 0, 0, tau=1.0)
    assert got == pytest.approx(expected, abs=1e-14)


def test_oracle_refuses_large_and_empty():
    with pytest.raises(InvalidInputError):
        V.brute_force_contrastive([1.0], [[1.0]] * 1025, [0] * 1025, 0, 0, 0.1)
    with pytest.raises(NoNegativesError):
        V.brute_force_contrastive([1.0], [[1.0]] * 3, [0] * 3, 0, 0, 0.1)


def test_oracle_large_tau_limit(rng):
    # every match probability tends to 1/N, so each posterior tends to 1/(1+K)
    N, d, K = 16, 5, 4
    slots = rng.standard_normal((N, d))
    slots /= np.linalg.norm(slots, axis=1, keepdims=True)
    labels = np.arange(N) % 4
    value = V.brute_force_contrastive(slots[0], slots, labels, 0, 0, tau=1e3, K=K)
    limit = math.log(1 + K) + K * math.log((1 + K) / K)
    assert value == pytest.approx(limit, rel=1e-2)
    bank = C.MemoryBank(slots, labels)
    s = C.ContrastiveSettings(tau=1e3, K=1, positive="bank", exact_z=True, full_enumeration=True)
    # production with every eligible slot (12 of them) against the oracle with K=12
    prod = C.directional_bank_loss(torch.from_numpy(slots[:1]), None, bank, labels[:1], s, indices=[0]).item()
    assert prod == pytest.approx(V.brute_force_contrastive(slots[0], slots, labels, 0, 0, tau=1e3), abs=1e-9)


def test_oracle_equivalence_passes():
    assert V.oracle_equivalence(n_banks=10) < V.ORACLE_TOLERANCE


def test_sign_flip_mutation_is_caught(monkeypatch):
    # mutate the loss on the log(1 - h) term: compute -log h + sum log(1 - h)
    def mutated(pos, neg, tau, log_z, N, neg_mask=None):
        log_z = torch.as_tensor(log_z, dtype=pos.dtype)
        lz_neg = log_z[:, None] if log_z.ndim == 1 else log_z
        if neg_mask is None:
            neg_mask = torch.ones(neg.shape, dtype=torch.bool)
        counts = torch.as_tensor(neg_mask).sum(-1).to(pos.dtype)
        log_noise = torch.log(counts / N)
        s_pos = pos / tau - log_z
        s_neg = neg / tau - lz_neg
        log_h = s_pos - torch.logaddexp(s_pos, log_noise)
        log_1m = log_noise[:, None] - torch.logaddexp(s_neg, log_noise[:, None])
        log_1m = torch.where(torch.as_tensor(neg_mask), log_1m, torch.zeros_like(log_1m))
        return (-log_h + log_1m.sum(-1)).mean()

    monkeypatch.setattr(C, "nce_loss_from_scores", mutated)
    assert V.oracle_equivalence(n_banks=3) > 1e-3
    results = V.run_checks()
    assert not all(r.passed for r in results)


def test_grad_check_linear_exact(rng):
    # central differences are exact for linear functions; what is left is
    # rounding in f, so keep weights away from zero and use the widest step
    w = torch.from_numpy(rng.choice([-1, 1], 7) * rng.uniform(0.5, 2.0, 7))
    x = torch.from_numpy(rng.standard_normal(7))
    assert V.grad_check(lambda x: (w * x).sum(), [x], eps=1e-4) < 1e-10


def test_grad_check_softmax_ce(rng):
    from mcl_okd import losses as L
    y = rng.integers(0, 6, 5)
    err = V.grad_check(lambda z: L.cross_entropy(L.softmax(z), y), [torch.from_numpy(rng.standard_normal((5, 6)))])
    assert err < 1e-6


def test_grad_check_detects_wrong_gradient(rng):
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(3, dtype=torch.float64)  # should be 2x

    assert V.grad_check(Bad.apply, [torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)]) > 0.1


def test_grad_check_preconditions(rng):
    x = torch.from_numpy(rng.standard_normal(3))
    with pytest.raises(InvalidInputError):
        V.grad_check(lambda x: x.sum(), [x.float()])
    with pytest.raises(InvalidInputError):
        V.grad_check(lambda x: x.sum(), [x], eps=1e-2)


def test_numerical_gradient_restores_inputs(rng):
    x = torch.from_numpy(rng.standard_normal(4))
    keep = x.clone()
    V.numerical_gradient(lambda v: (v ** 3).sum(), [x])
    assert torch.equal(x, keep)


def test_full_suite_passes_and_tight_tolerance_fails():
    results = V.run_checks()
    assert all(r.passed for r in results), [str(r) for r in results if not r.passed]
    tight = V.run_checks(grad_tolerance=1e-9)
    assert not all(r.passed for r in tight if r.kind == "grad")
