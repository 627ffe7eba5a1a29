"""Prototypical episodic evaluation of a frozen embedding model."""
from dataclasses import dataclass, replace

import numpy as np
import torch

from .data import make_synthetic, sample_episode
from .errors import InvalidInputError


def compute_prototypes(support):
    """Class means of the support embeddings.

    ``support`` is a ``(way, shot, dim)`` array or a list of per-class
    ``(shot_c, dim)`` arrays. Returns ``(way, dim)``.
    """
    groups = [np.asarray(g, dtype=np.float64) for g in support]
    if not groups:
        raise InvalidInputError("no classes in the support set")
    for c, g in enumerate(groups):
        if g.ndim != 2 or g.shape[0] == 0:
            raise InvalidInputError(f"class {c} has no support embeddings")
    return np.stack([g.mean(axis=0) for g in groups])


def classify_queries(queries, prototypes):
    """Index of the nearest prototype (squared Euclidean) for each query;
    ties go to the lowest class index."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.ndim != 2 or prototypes.shape[0] == 0:
        raise InvalidInputError("need at least one prototype")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    dist = ((queries[:, None, :] - prototypes[None, :, :]) ** 2).sum(-1)
    return dist.argmin(axis=1)  # argmin keeps the first minimum


@dataclass
class FewShotResult:
    way: int
    shot: int
    episodes: int
    mean: float          # accuracy, percent
    ci: float            # 95% half-width, percent
    accuracies: np.ndarray

    def record(self):
        return {"way": self.way, "shot": self.shot, "episodes": self.episodes,
                "mean": round(self.mean, 4), "ci": round(self.ci, 4)}

    def __str__(self):
        return f"{self.way}-way {self.shot}-shot: {self.mean:.2f} ± {self.ci:.2f} ({self.episodes} episodes)"


def embed_dataset(model, dataset, batch_size=500):
    """Run ``model`` over ``dataset.images``; returns a float64 array."""
    chunks = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            out = model(dataset.images[start : start + batch_size])
            chunks.append(out.detach().cpu().numpy() if isinstance(out, torch.Tensor) else np.asarray(out))
    return np.concatenate(chunks).astype(np.float64)


def episodic_accuracy(model, dataset, way, shot, episodes, rng, query_per_class=15):
    """Mean accuracy over ``episodes`` sampled episodes with a 95% interval
    ``1.96 * std / sqrt(episodes)`` (population std, so one episode gives 0)."""
    if episodes < 1:
        raise InvalidInputError("need at least one episode")
    emb = embed_dataset(model, dataset)
    accs = np.empty(episodes)
    for e in range(episodes):
        ep = sample_episode(dataset, way, shot, query_per_class, rng)
        protos = compute_prototypes(emb[ep.support])
        pred = classify_queries(emb[ep.query.reshape(-1)], protos)
        truth = np.repeat(np.arange(way), query_per_class)
        accs[e] = 100.0 * np.mean(pred == truth)
    ci = 1.96 * accs.std() / np.sqrt(episodes)
    return FewShotResult(way, shot, episodes, float(accs.mean()), float(ci), accs)


def feature_extractor(net, use_head=False):
    """Embedding function of a deployment network (pooled features), or of a
    peer graph's last peer (pooled features, or the projection head output
    with ``use_head``)."""
    net.eval()
    dtype = next(net.parameters()).dtype

    def embed(x):
        x = x.to(dtype)
        if hasattr(net, "branches"):
            out = net(x)[-1]
            return out.embedding if use_head else out.features
        if use_head:
            raise InvalidInputError("a deployment network has no projection head")
        return net.features(x)

    return embed


def novel_class_dataset(spec, per_class=60, class_offset=1000):
    """Synthetic classes disjoint from those of ``spec`` (same image
    statistics), for few-shot evaluation of a model trained on ``spec``."""
    novel = replace(spec, n_train=per_class * spec.num_classes, class_offset=class_offset)
    return make_synthetic(novel, "train")
