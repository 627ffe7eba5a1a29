"""Top-1 error of the deployment network and of the peer ensemble."""
import json

import numpy as np
import torch

from .errors import InvalidInputError


def _as_logit_list(out):
    if isinstance(out, torch.Tensor):
        return [out]
    return [o.logits if hasattr(o, "logits") else o for o in out]


def _iterate(dataset, batch_size):
    if len(dataset) == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    for start in range(0, len(dataset), batch_size):
        yield dataset.images[start : start + batch_size], dataset.labels[start : start + batch_size]


def _run(model, dataset, batch_size):
    """Per-peer logits for the whole dataset: list of ``(N, C)`` tensors."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    chunks = []
    try:
        with torch.no_grad():
            for x, _ in _iterate(dataset, batch_size):
                param = next(model.parameters(), None) if hasattr(model, "parameters") else None
                dtype = param.dtype if param is not None else x.dtype
                chunks.append(_as_logit_list(model(x.to(dtype))))
    finally:
        if was_training:
            model.train()
    return [torch.cat(parts) for parts in zip(*chunks)]


def error_from_logits(logits, labels):
    """Percentage of rows whose argmax differs from the label."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels)
    if labels.numel() == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    wrong = (logits.argmax(dim=-1) != labels).sum().item()
    return 100.0 * wrong / labels.numel()


def ensemble_logits(logit_list):
    """Arithmetic mean of the peers' logits."""
    if len(logit_list) == 0:
        raise InvalidInputError("ensemble of zero peers")
    return torch.stack([torch.as_tensor(z) for z in logit_list]).mean(dim=0)


def top1_error(model, dataset, batch_size=500):
    """Top-1 error (%) of a single-output classifier, or of the last peer
    when ``model`` returns one output per peer."""
    logits = _run(model, dataset, batch_size)
    return error_from_logits(logits[-1], dataset.labels)


def ensemble_top1_error(graph, dataset, batch_size=500):
    """Top-1 error (%) of the argmax over the mean of all peers' logits."""
    logits = _run(graph, dataset, batch_size)
    return error_from_logits(ensemble_logits(logits), dataset.labels)


def graph_errors(graph, dataset, batch_size=500):
    """One pass over ``dataset``: per-peer errors, deployment error (last
    peer) and ensemble error."""
    logits = _run(graph, dataset, batch_size)
    peers = [error_from_logits(z, dataset.labels) for z in logits]
    return {
        "peer_errors": peers,
        "deploy_error": peers[-1],
        "ensemble_error": error_from_logits(ensemble_logits(logits), dataset.labels),
    }


def mean_std(values):
    """Mean and sample standard deviation (0 for a single value)."""
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std


def summary_record(method, errors, seeds=None):
    mean, std = mean_std(errors)
    return {
        "method": method,
        "seeds": list(seeds) if seeds is not None else None,
        "errors": [float(e) for e in errors],
        "mean": mean,
        "std": std,
    }


def format_results_table(records):
    """Plain-text table of ``method | mean +- std`` rows."""
    width = max([len("Method")] + [len(r["method"]) for r in records])
    lines = [f"{'Method':<{width}}  Top-1 error (%)", "-" * (width + 18)]
    for r in records:
        lines.append(f"{r['method']:<{width}}  {r['mean']:.2f} ± {r['std']:.2f}")
    return "\n".join(lines)


def append_record(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record, allow_nan=False) + "\n")

