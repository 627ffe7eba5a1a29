"""Joint training of the peer graph.

One step: forward all peers, assemble ``ce + T^2 kl + beta contrastive``,
backpropagate, step the optimizer, then write the step's embeddings into the
memory banks.
"""
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import checkpoint
from .config import TrainConfig, from_dict
from .contrastive import MemoryBank, bank_init, bank_update, total_contrastive_loss
from .data import augment_batch, load_dataset
from .errors import IncompatibleCheckpointError, NonFiniteLossError
from .evaluation import graph_errors, mean_std
from .losses import combine, cross_entropy_from_logits, kl_from_logits, weighted_total
from .peers import build, export_deployment, save_deployment

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}

# Fields that must agree between a checkpoint and the config restoring it.
STRUCTURAL_KEYS = (
    "dataset", "synth_n_train", "synth_num_classes", "synth_resolution", "synth_seed",
    "val_fraction", "M", "share_stem", "widths", "depths", "branch_stages", "d",
    "proj_layers", "block", "dtype",
)


def compute_objective(graph, banks, batch, config, rng=None, negatives=None):
    """Forward all peers and assemble the objective without side effects on
    parameters or banks (unset bank normalizers do get estimated).

    Returns ``(total, parts, outputs)`` where ``parts`` maps ``ce``, ``kl``
    and ``contrastive`` to scalar tensors.
    """
    indices, images, labels = batch
    outputs = graph(images)
    bad = [m for m, o in enumerate(outputs)
           if not (torch.isfinite(o.logits).all() and torch.isfinite(o.embedding).all())]
    if bad:
        nan = float("nan")
        raise NonFiniteLossError(f"non-finite outputs from peer(s) {bad}",
                                 {"ce": nan, "kl": nan, "contrastive": nan, "total": nan})
    zero = outputs[0].logits.new_zeros(())

    ce = sum(cross_entropy_from_logits(o.logits, labels) for o in outputs)
    if config.kl_enabled:
        kl = kl_from_logits([o.logits for o in outputs], outputs[-1].logits, config.T,
                            detach_teacher=config.kl_detach)
    else:
        kl = zero
    if config.contrastive_enabled:
        contrast = total_contrastive_loss(
            [o.embedding for o in outputs], banks, np.asarray(labels), np.asarray(indices),
            config.contrastive(), rng=rng, negatives=negatives,
        )
    else:
        contrast = zero
    total = weighted_total(ce, kl, contrast, config.T, config.beta)
    return total, {"ce": ce, "kl": kl, "contrastive": contrast}, outputs


def train_step(graph, banks, batch, config, optimizer, rng, negatives=None, update_banks=True):
    """One optimization step on ``batch = (indices, images, labels)``.

    ``optimizer=None`` evaluates the objective without updating anything but
    the banks. ``negatives`` optionally fixes the sampled negative indices per
    ``(src, dst)`` direction. Returns ``(LossBundle, outputs)``.
    """
    total, parts, outputs = compute_objective(graph, banks, batch, config, rng, negatives)
    components = {k: v.item() for k, v in parts.items()}
    components["total"] = total.item()
    if not all(math.isfinite(v) for v in components.values()):
        raise NonFiniteLossError(f"non-finite loss: {components}", components)

    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
    if update_banks and config.contrastive_enabled:
        indices = np.asarray(batch[0])
        for bank, out in zip(banks, outputs):
            bank_update(bank, indices, out.embedding.detach())
    bundle = combine(components["ce"], components["kl"], components["contrastive"], config.T, config.beta)
    return bundle, outputs


@dataclass
class TrainState:
    config: TrainConfig
    graph: torch.nn.Module
    banks: list
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    rng: np.random.Generator
    epoch: int = 0
    best_error: Optional[float] = None
    history: List[dict] = field(default_factory=list)

    def state_dict(self):
        return {
            "config": self.config.to_dict(),
            "graph": self.graph.state_dict(),
            "banks": [b.state_dict() for b in self.banks],
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "epoch": self.epoch,
            "best_error": self.best_error,
            "history": list(self.history),
        }


def _make_optimizer(config, graph):
    optimizer = torch.optim.SGD(
        graph.parameters(), lr=config.lr, momentum=config.momentum,
        weight_decay=config.weight_decay, nesterov=config.nesterov and config.momentum > 0,
    )
    if config.schedule == "cosine":
        E = max(config.epochs, 1)
        factor = lambda e: 0.5 * (1 + math.cos(math.pi * e / E))
    elif config.schedule == "step":
        factor = lambda e: config.gamma ** sum(e >= m for m in config.milestones)
    else:
        factor = lambda e: 1.0
    return optimizer, torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def init_state(config, train_labels):
    """Fresh graph, banks, optimizer and RNG for ``config``."""
    torch.manual_seed(config.seed)
    dtype = _DTYPES[config.dtype]
    graph = build(config.backbone(), config.M, share_stem=config.share_stem, seed=config.seed, dtype=dtype)
    banks = []
    if config.contrastive_enabled:
        labels = np.asarray(train_labels)
        np_dtype = np.float32 if config.dtype == "float32" else np.float64
        banks = [
            bank_init(len(labels), config.d, labels, seed=[config.seed, m], rho=config.rho, dtype=np_dtype)
            for m in range(config.M)
        ]
    optimizer, scheduler = _make_optimizer(config, graph)
    return TrainState(config, graph, banks, optimizer, scheduler, np.random.default_rng(config.seed))


def _check_compatible(saved, config):
    mismatched = [k for k in STRUCTURAL_KEYS if saved.get(k) != config.to_dict().get(k)]
    if mismatched:
        detail = ", ".join(f"{k}: checkpoint={saved.get(k)!r} config={config.to_dict().get(k)!r}" for k in mismatched)
        raise IncompatibleCheckpointError(f"checkpoint does not match the configuration ({detail})")


def save_checkpoint(state, path):
    return checkpoint.save(state.state_dict(), path)


def restore_checkpoint(path, config=None, train_labels=None):
    """Rebuild a :class:`TrainState` from ``path``.

    With ``config``, structural fields must match the saved configuration
    (``IncompatibleCheckpointError`` otherwise); hyperparameters such as
    ``epochs`` or ``lr`` may differ and take the new value.
    """
    blob = checkpoint.load(path)
    saved = blob["config"]
    if config is None:
        config = from_dict(saved, require=False)
    else:
        _check_compatible(saved, config)
    if train_labels is None and blob["banks"]:
        train_labels = blob["banks"][0]["labels"]
    state = init_state(config, train_labels if train_labels is not None else np.zeros(2, dtype=np.int64))
    state.graph.load_state_dict(blob["graph"])
    if len(blob["banks"]) != len(state.banks):
        raise IncompatibleCheckpointError("checkpoint bank count does not match the configuration")
    state.banks = [MemoryBank.from_state_dict(b) for b in blob["banks"]]
    state.optimizer.load_state_dict(blob["optimizer"])
    state.scheduler.load_state_dict(blob["scheduler"])
    state.rng.bit_generator.state = blob["rng"]
    torch.set_rng_state(blob["torch_rng"])
    state.epoch = blob["epoch"]
    state.best_error = blob["best_error"]
    state.history = list(blob["history"])
    return state


def load_graph(path):
    """``(graph, config)`` from a checkpoint, for evaluation."""
    blob = checkpoint.load(path)
    config = from_dict(blob["config"], require=False)
    graph = build(config.backbone(), config.M, share_stem=config.share_stem, seed=0, dtype=_DTYPES[config.dtype])
    graph.load_state_dict(blob["graph"])
    graph.eval()
    return graph, config


def load_splits(config):
    """``(train, val, test)``; ``val`` is ``None`` unless ``val_fraction > 0``."""
    kwargs = dict(root=config.data_root, synthetic=config.synthetic())
    train = load_dataset(config.dataset, "train", **kwargs)
    test = load_dataset(config.dataset, "test", **kwargs)
    val = None
    if config.val_fraction > 0:
        order = np.random.default_rng([config.seed, 17]).permutation(len(train))
        n_val = int(round(config.val_fraction * len(train)))
        val = train.subset(np.sort(order[:n_val]))
        train = train.subset(np.sort(order[n_val:]))
    return train, val, test


def run_epoch(state, train, test, val=None):
    """Train for one epoch, evaluate, and return the metrics record."""
    config = state.config
    dtype = _DTYPES[config.dtype]
    graph = state.graph
    graph.train()
    start = time.perf_counter()
    sums = {"ce": 0.0, "kl": 0.0, "contrastive": 0.0, "total": 0.0}
    seen = wrong = 0
    for indices, images, labels in train.batches(config.batch_size, rng=state.rng, shuffle=True):
        if len(labels) < 2:  # batch norm needs more than one sample
            continue
        images = augment_batch(images, config.augment, state.rng).to(dtype)
        bundle, outputs = train_step(graph, state.banks, (indices, images, labels), config, state.optimizer, state.rng)
        n = len(labels)
        for k, v in bundle.as_dict().items():
            sums[k] += v * n
        wrong += (outputs[-1].logits.detach().argmax(-1) != labels).sum().item()
        seen += n
    state.scheduler.step()
    state.epoch += 1

    record = {"epoch": state.epoch}
    record.update({k: v / max(seen, 1) for k, v in sums.items()})
    record["train_error"] = 100.0 * wrong / max(seen, 1)
    errors = graph_errors(graph, test)
    record["eval_error"] = errors["deploy_error"]
    record["ensemble_error"] = errors["ensemble_error"]
    record["peer_errors"] = errors["peer_errors"]
    if val is not None:
        record["val_error"] = graph_errors(graph, val)["deploy_error"]
    record["lr"] = state.optimizer.param_groups[0]["lr"]
    record["wall_time"] = time.perf_counter() - start
    return record


@dataclass
class FitResult:
    graph: torch.nn.Module
    deployment: torch.nn.Module
    history: List[dict]
    state: TrainState


def fit(config, out_dir=None, resume=None, splits=None):
    """Train per ``config``; returns a :class:`FitResult`.

    With ``out_dir``, appends one JSON line per epoch to ``metrics.jsonl``,
    keeps ``final.ckpt`` (every epoch) and ``best.ckpt`` (lowest validation
    error, or training error without a validation split), and writes the
    deployment network to ``deploy.pt`` plus ``deploy.pt.json``.
    """
    train, val, test = splits if splits is not None else load_splits(config)
    if resume is not None:
        state = restore_checkpoint(resume, config, train.labels.numpy())
    else:
        state = init_state(config, train.labels.numpy())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    while state.epoch < config.epochs:
        record = run_epoch(state, train, test, val)
        state.history.append(record)
        logger.info(
            "epoch %d  loss %.4f  train %.2f%%  test %.2f%%  ens %.2f%%",
            record["epoch"], record["total"], record["train_error"], record["eval_error"], record["ensemble_error"],
        )
        selection = record.get("val_error", record["train_error"])
        improved = state.best_error is None or selection < state.best_error
        if improved:
            state.best_error = selection
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            save_checkpoint(state, out / "final.ckpt")
            if improved:
                save_checkpoint(state, out / "best.ckpt")

    deployment = export_deployment(state.graph)
    if out is not None:
        if not (out / "final.ckpt").exists():
            save_checkpoint(state, out / "final.ckpt")
        save_deployment(deployment, out / "deploy.pt")
    return FitResult(state.graph, deployment, state.history, state)


def fit_seeds(config, seeds, out_dir=None):
    """Independent runs per seed plus a mean/std summary of the final
    deployment and ensemble errors."""
    results = []
    for seed in seeds:
        run_dir = Path(out_dir) / f"seed_{seed}" if out_dir is not None else None
        results.append(fit(config.replace(seed=seed), out_dir=run_dir))
    deploy = [r.history[-1]["eval_error"] for r in results if r.history]
    ens = [r.history[-1]["ensemble_error"] for r in results if r.history]
    summary = {"seeds": list(seeds)}
    if deploy:
        summary["deploy_error_mean"], summary["deploy_error_std"] = mean_std(deploy)
        summary["ensemble_error_mean"], summary["ensemble_error_std"] = mean_std(ens)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)
    return [r.history for r in results], summary
