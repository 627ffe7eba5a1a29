import json
import time

import numpy as np
import pytest
import torch

from mcl_okd import trainer as TR
from mcl_okd.checkpoint import MAGIC
from mcl_okd.config import TrainConfig
from mcl_okd.errors import CheckpointIntegrityError, IncompatibleCheckpointError, NonFiniteLossError
from mcl_okd.verification import recompute_objective

TINY = dict(
    synth_n_train=120, synth_n_test=60, synth_num_classes=4, synth_resolution=8,
    widths=(4, 6, 8), d=16, K=8, batch_size=32, epochs=2,
)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def _batch(train, n=16, start=0, dtype=torch.float64):
    idx = torch.arange(start, start + n)
    return idx, train.images[idx].to(dtype), train.labels[idx]


def test_degenerate_objective_is_summed_ce():
    cfg = tiny(beta=0.0, use_kl=False, M=3)
    train, _, _ = TR.load_splits(cfg)
    state = TR.init_state(cfg, train.labels.numpy())
    total, parts, outputs = TR.compute_objective(state.graph, state.banks, _batch(train, dtype=torch.float32), cfg)
    ce = sum(torch.nn.functional.cross_entropy(o.logits, train.labels[:16]) for o in outputs)
    assert total.item() == pytest.approx(ce.item(), rel=1e-6)
    assert parts["kl"].item() == 0 and parts["contrastive"].item() == 0
    assert state.banks == []


def test_objective_matches_independent_recomputation():
    cfg = tiny(M=2, dtype="float64", T=2.0, beta=0.3)
    train, _, _ = TR.load_splits(cfg)
    state = TR.init_state(cfg, train.labels.numpy())
    state.graph.eval()
    batch = _batch(train, 8)
    rng = np.random.default_rng(0)
    negatives = {(a, b): TR.total_contrastive_loss.__globals__["sample_negative_indices"](
        state.banks[b], batch[2].numpy(), cfg.K, rng) for a in range(2) for b in range(2) if a != b}
    snapshot = [(b.slots.copy(), None) for b in state.banks]
    bundle, outputs = TR.train_step(state.graph, state.banks, batch, cfg, None, rng, negatives=negatives)
    banks = [(s, b.z) for (s, _), b in zip(snapshot, state.banks)]
    ref = recompute_objective(
        [o.logits.detach().numpy() for o in outputs], [o.embedding.detach().numpy() for o in outputs],
        batch[2].numpy(), banks, negatives, cfg.T, cfg.beta, cfg.tau)
    for key in ("ce", "kl", "contrastive", "total"):
        assert getattr(bundle, key) == pytest.approx(ref[key], rel=1e-9), key
    assert bundle.total == pytest.approx(bundle.ce + cfg.T ** 2 * bundle.kl + cfg.beta * bundle.contrastive, rel=1e-12)


def test_bank_rows_outside_batch_unchanged():
    cfg = tiny()
    train, _, _ = TR.load_splits(cfg)
    state = TR.init_state(cfg, train.labels.numpy())
    before = [b.slots.copy() for b in state.banks]
    TR.train_step(state.graph, state.banks, _batch(train, dtype=torch.float32), cfg, state.optimizer, state.rng)
    for b, old in zip(state.banks, before):
        np.testing.assert_array_equal(b.slots[16:], old[16:])
        assert not np.array_equal(b.slots[:16], old[:16])


def test_banks_updated_with_pre_step_embeddings():
    cfg = tiny(rho=1.0, dtype="float64")
    train, _, _ = TR.load_splits(cfg)
    state = TR.init_state(cfg, train.labels.numpy())
    _, outputs = TR.train_step(state.graph, state.banks, _batch(train), cfg, state.optimizer, state.rng)
    for b, o in zip(state.banks, outputs):
        np.testing.assert_allclose(b.slots[:16], o.embedding.detach().numpy(), atol=1e-15)


def test_projection_heads_irrelevant_without_contrastive():
    cfg = tiny(beta=0.0, dtype="float64")
    train, _, _ = TR.load_splits(cfg)
    a = TR.init_state(cfg, train.labels.numpy())
    b = TR.init_state(cfg, train.labels.numpy())
    for branch in b.graph.branches:
        for p in branch.projection.parameters():
            p.requires_grad_(False)
    batch = _batch(train)
    TR.train_step(a.graph, a.banks, batch, cfg, a.optimizer, np.random.default_rng(0))
    TR.train_step(b.graph, b.banks, batch, cfg, b.optimizer, np.random.default_rng(0))
    for (name, pa), pb in zip(a.graph.named_parameters(), b.graph.parameters()):
        if ".projection." not in name:
            assert torch.equal(pa, pb), name


def test_non_finite_loss_reports_components():
    cfg = tiny()
    train, _, _ = TR.load_splits(cfg)
    state = TR.init_state(cfg, train.labels.numpy())
    idx, images, labels = _batch(train)
    images = images.float().clone()
    images[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        TR.train_step(state.graph, state.banks, (idx, images, labels), cfg, state.optimizer, state.rng)
    assert set(info.value.components) >= {"ce", "kl", "contrastive", "total"}


def test_epochs_zero(tmp_path):
    result = TR.fit(tiny(epochs=0), out_dir=tmp_path)
    assert result.history == []
    assert (tmp_path / "deploy.pt").exists() and (tmp_path / "final.ckpt").exists()


def test_smoke_run_fast_and_learning(tmp_path):
    cfg = tiny(synth_n_train=1000, synth_n_test=200, synth_num_classes=10, synth_resolution=16,
               widths=(8, 16, 32), epochs=2, batch_size=64)
    start = time.perf_counter()
    result = TR.fit(cfg, out_dir=tmp_path)
    assert time.perf_counter() - start < 60
    first, last = result.history
    assert last["ce"] < first["ce"]
    for rec in result.history:
        assert all(np.isfinite(rec[k]) for k in ("ce", "kl", "contrastive", "total"))
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2]
    for field in ("ce", "kl", "contrastive", "total", "train_error", "eval_error", "ensemble_error", "wall_time"):
        assert field in first
    for name in ("final.ckpt", "best.ckpt", "deploy.pt", "deploy.pt.json"):
        assert (tmp_path / name).exists()


def _strip(history):
    return [{k: v for k, v in rec.items() if k != "wall_time"} for rec in history]


def test_identical_runs_identical_records():
    a = TR.fit(tiny())
    b = TR.fit(tiny())
    assert _strip(a.history) == _strip(b.history)


def test_resume_is_bitwise(tmp_path):
    cfg = tiny(dtype="float64", epochs=3)
    full = TR.fit(cfg)
    # an interrupted run: one epoch of the same config, checkpointed
    train, val, test = TR.load_splits(cfg)
    state = TR.init_state(cfg, train.labels.numpy())
    state.history.append(TR.run_epoch(state, train, test, val))
    TR.save_checkpoint(state, tmp_path / "partial.ckpt")
    torch.manual_seed(123)  # disturb global RNG; the checkpoint must restore it
    resumed = TR.fit(cfg, resume=tmp_path / "partial.ckpt")
    assert _strip(resumed.history) == _strip(full.history)
    for (_, a), (_, b) in zip(full.graph.state_dict().items(), resumed.graph.state_dict().items()):
        assert torch.equal(a, b)
    for ba, bb in zip(full.state.banks, resumed.state.banks):
        np.testing.assert_array_equal(ba.slots, bb.slots)


def test_checkpoint_roundtrip_then_step(tmp_path):
    cfg = tiny(dtype="float64")
    train, _, _ = TR.load_splits(cfg)
    state = TR.init_state(cfg, train.labels.numpy())
    TR.train_step(state.graph, state.banks, _batch(train), cfg, state.optimizer, state.rng)
    TR.save_checkpoint(state, tmp_path / "s.ckpt")
    other = TR.restore_checkpoint(tmp_path / "s.ckpt", cfg, train.labels.numpy())
    batch = _batch(train, start=16)
    b1, _ = TR.train_step(state.graph, state.banks, batch, cfg, state.optimizer, state.rng)
    b2, _ = TR.train_step(other.graph, other.banks, batch, cfg, other.optimizer, other.rng)
    assert b1 == b2
    for p, q in zip(state.graph.parameters(), other.graph.parameters()):
        assert torch.equal(p, q)


def test_restore_mismatched_config(tmp_path):
    TR.fit(tiny(epochs=1), out_dir=tmp_path)
    with pytest.raises(IncompatibleCheckpointError, match="M"):
        TR.restore_checkpoint(tmp_path / "final.ckpt", tiny(M=3))
    # non-structural fields may change
    TR.restore_checkpoint(tmp_path / "final.ckpt", tiny(epochs=5, lr=0.01))


def test_corrupt_checkpoint_rejected(tmp_path):
    TR.fit(tiny(epochs=1), out_dir=tmp_path)
    path = tmp_path / "final.ckpt"
    blob = bytearray(path.read_bytes())
    assert blob[:8] == MAGIC
    blob[-10] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointIntegrityError):
        TR.restore_checkpoint(path)
    path.write_bytes(bytes(blob[:40]))
    with pytest.raises(CheckpointIntegrityError):
        TR.load_graph(path)


def test_multi_seed_summary(tmp_path):
    histories, summary = TR.fit_seeds(tiny(epochs=1), [0, 1, 2], out_dir=tmp_path)
    assert len(histories) == 3 and all(len(h) == 1 for h in histories)
    assert histories[0] != histories[1]
    finals = [h[-1]["eval_error"] for h in histories]
    assert summary["deploy_error_mean"] == pytest.approx(np.mean(finals))
    assert summary["deploy_error_std"] == pytest.approx(np.std(finals, ddof=1))
    assert json.loads((tmp_path / "summary.json").read_text())["seeds"] == [0, 1, 2]


def test_validation_split_drives_best_checkpoint(tmp_path):
    result = TR.fit(tiny(val_fraction=0.25, epochs=1), out_dir=tmp_path)
    rec = result.history[0]
    assert "val_error" in rec
    assert result.state.best_error == rec["val_error"]
    train, val, _ = TR.load_splits(tiny(val_fraction=0.25))
    assert (len(train), len(val)) == (90, 30)
