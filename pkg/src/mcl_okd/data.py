"""Indexed datasets, augmentation and few-shot episode sampling.

Every instance carries a stable integer index (its position in the split's
canonical order), which is how memory banks address it.

Images are stored channels-first, ``(N, C, H, W)`` float32.

Dataset root layout (``root`` argument or ``$MCL_OKD_DATA``)::

    <root>/cifar-10-batches-py/data_batch_{1..5}, test_batch
    <root>/cifar-100-python/train, test

i.e. the extracted python-pickle archives as distributed upstream.
"""
import os
import pickle
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetNotFoundError, InvalidInputError

DATA_ENV = "MCL_OKD_DATA"


class IndexedDataset:
    def __init__(self, images, labels, num_classes=None, name="dataset"):
        images = torch.as_tensor(images, dtype=torch.float32)
        labels = torch.as_tensor(labels, dtype=torch.long)
        if images.shape[0] != labels.shape[0]:
            raise InvalidInputError("images and labels differ in length")
        self.images = images
        self.labels = labels
        self.indices = torch.arange(len(labels))
        self.num_classes = int(num_classes if num_classes is not None else labels.max().item() + 1)
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidInputError(f"labels outside [0, {self.num_classes})")
        self.name = name

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i):
        return int(self.indices[i]), self.images[i], int(self.labels[i])

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        """New dataset over ``idx``, re-indexed from 0 in the given order."""
        idx = torch.as_tensor(idx, dtype=torch.long)
        return IndexedDataset(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def batches(self, batch_size, rng=None, shuffle=False, drop_last=False):
        """Yield ``(indices, images, labels)`` tensors."""
        n = len(self)
        order = rng.permutation(n) if shuffle else np.arange(n)
        stop = n - n % batch_size if drop_last else n
        for start in range(0, stop, batch_size):
            sel = torch.from_numpy(order[start : start + batch_size])
            yield self.indices[sel], self.images[sel], self.labels[sel]


# -- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the procedural image-classification task.

    Each class is a mixture of ``modes`` templates built from random colored
    Gaussian blobs; an instance is one template, randomly shifted and scaled,
    plus a distractor blob and pixel noise. Class templates depend only on
    ``seed`` and the class id, so train and test splits share them while
    ``class_offset`` selects a disjoint set of classes.
    """

    n_train: int = 5000
    n_test: int = 2000
    num_classes: int = 10
    resolution: int = 16
    channels: int = 3
    modes: int = 3
    blobs: int = 3
    shift: int = 2
    noise: float = 0.6
    distractor: float = 0.8
    seed: int = 0
    class_offset: int = 0

    def to_dict(self):
        return asdict(self)


def _blob(res, rng, width_range=(1.2, 3.0)):
    cy, cx = rng.uniform(0, res, size=2)
    s = rng.uniform(*width_range)
    yy, xx = np.mgrid[0:res, 0:res]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))


def _class_templates(spec, class_id):
    rng = np.random.default_rng([spec.seed, class_id, 7919])
    templates = np.zeros((spec.modes, spec.channels, spec.resolution, spec.resolution))
    for m in range(spec.modes):
        for _ in range(spec.blobs):
            color = rng.normal(size=spec.channels)
            templates[m] += color[:, None, None] * _blob(spec.resolution, rng)
    return templates


def make_synthetic(spec, split="train"):
    """Generate the ``train`` or ``test`` split described by ``spec``."""
    if split not in ("train", "test"):
        raise InvalidInputError(f"unknown split {split!r}")
    n = spec.n_train if split == "train" else spec.n_test
    C, res = spec.num_classes, spec.resolution
    templates = np.stack([_class_templates(spec, spec.class_offset + c) for c in range(C)])
    rng = np.random.default_rng([spec.seed, spec.class_offset, 0 if split == "train" else 1])
    # balanced labels in a shuffled canonical order
    labels = rng.permutation(np.arange(n) % C)
    modes = rng.integers(0, spec.modes, size=n)
    images = templates[labels, modes] * rng.uniform(0.7, 1.3, size=(n, 1, 1, 1))
    shifts = rng.integers(-spec.shift, spec.shift + 1, size=(n, 2))
    for i in range(n):
        images[i] = np.roll(images[i], tuple(shifts[i]), axis=(1, 2))
    for i in range(n):
        color = rng.normal(size=spec.channels) * spec.distractor
        images[i] += color[:, None, None] * _blob(res, rng)
    images += rng.normal(scale=spec.noise, size=images.shape)
    return IndexedDataset(images.astype(np.float32), labels, num_classes=C, name=f"synthetic-{split}")


def make_separable(num_classes=10, per_class=20, resolution=16, channels=3, seed=0):
    """Every instance of a class is the same constant-color image: trivially
    separable by any injective embedding."""
    rng = np.random.default_rng(seed)
    colors = rng.uniform(-1, 1, size=(num_classes, channels))
    labels = np.repeat(np.arange(num_classes), per_class)
    images = np.broadcast_to(colors[labels][:, :, None, None], (len(labels), channels, resolution, resolution))
    return IndexedDataset(np.ascontiguousarray(images, dtype=np.float32), labels, num_classes, "separable")


# -- CIFAR -------------------------------------------------------------------

_CIFAR_MEAN = {
    "cifar10": (0.4914, 0.4822, 0.4465),
    "cifar100": (0.5071, 0.4865, 0.4409),
}
_CIFAR_STD = {
    "cifar10": (0.2470, 0.2435, 0.2616),
    "cifar100": (0.2673, 0.2564, 0.2762),
}


def _unpickle(path):
    if not path.exists():
        raise DatasetNotFoundError(
            f"missing {path}; extract the python version of the archive under the data root "
            f"(pass root=... or set ${DATA_ENV})"
        )
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="bytes")


def _load_cifar(name, split, root):
    if name == "cifar100":
        blob = _unpickle(root / "cifar-100-python" / ("train" if split == "train" else "test"))
        data, labels, C = blob[b"data"], blob[b"fine_labels"], 100
    else:
        base = root / "cifar-10-batches-py"
        files = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
        blobs = [_unpickle(base / f) for f in files]
        data = np.concatenate([b[b"data"] for b in blobs])
        labels = sum((list(b[b"labels"]) for b in blobs), [])
        C = 10
    images = np.asarray(data, dtype=np.float32).reshape(-1, 3, 32, 32) / 255.0
    mean = np.array(_CIFAR_MEAN[name], dtype=np.float32)[:, None, None]
    std = np.array(_CIFAR_STD[name], dtype=np.float32)[:, None, None]
    return IndexedDataset((images - mean) / std, np.asarray(labels), num_classes=C, name=f"{name}-{split}")


def load_dataset(name, split, root=None, synthetic=None):
    """Load a split by name: ``synthetic`` (needs ``synthetic``, a
    :class:`SyntheticSpec`), ``cifar10`` or ``cifar100``."""
    if split not in ("train", "test"):
        raise InvalidInputError(f"unknown split {split!r}")
    if name == "synthetic":
        return make_synthetic(synthetic or SyntheticSpec(), split)
    if name in ("cifar10", "cifar100"):
        root = root or os.environ.get(DATA_ENV)
        if not root:
            raise DatasetNotFoundError(f"no data root given for {name}; pass root=... or set ${DATA_ENV}")
        return _load_cifar(name, split, Path(root))
    raise InvalidInputError(f"unknown dataset {name!r}")


# -- augmentation ------------------------------------------------------------

AUGMENT_POLICIES = ("none", "standard")


def augment_batch(images, policy, rng, pad=None):
    """Pad-crop plus random horizontal flip (``standard``) or identity (``none``).

    ``images`` is ``(B, C, H, W)``; returns a new tensor of the same shape.
    Zero padding of ``H // 8`` pixels unless ``pad`` is given.
    """
    if policy not in AUGMENT_POLICIES:
        raise InvalidInputError(f"unknown augmentation policy {policy!r}")
    if policy == "none":
        return images
    B, _, H, W = images.shape
    pad = max(1, H // 8) if pad is None else pad
    padded = torch.nn.functional.pad(images, (pad, pad, pad, pad))
    oy = rng.integers(0, 2 * pad + 1, size=B)
    ox = rng.integers(0, 2 * pad + 1, size=B)
    flip = rng.random(B) < 0.5
    out = torch.empty_like(images)
    for b in range(B):
        crop = padded[b, :, oy[b] : oy[b] + H, ox[b] : ox[b] + W]
        out[b] = crop.flip(-1) if flip[b] else crop
    return out


def augment(image, policy, rng):
    """Augment a single ``(C, H, W)`` image."""
    return augment_batch(image[None], policy, rng)[0]


# -- episodes ----------------------------------------------------------------

@dataclass
class Episode:
    classes: np.ndarray   # (way,) original class ids; episode label k <-> classes[k]
    support: np.ndarray   # (way, shot) dataset positions
    query: np.ndarray     # (way, query_per_class) dataset positions

    @property
    def way(self):
        return len(self.classes)

    @property
    def shot(self):
        return self.support.shape[1]


def sample_episode(dataset, way, shot, query_per_class, rng):
    """Sample ``way`` classes, then ``shot + query_per_class`` distinct
    instances of each, split into support and query."""
    if way < 1 or shot < 1 or query_per_class < 0:
        raise InvalidInputError("need way >= 1, shot >= 1, query_per_class >= 0")
    labels = dataset.labels.numpy()
    need = shot + query_per_class
    classes, counts = np.unique(labels, return_counts=True)
    usable = classes[counts >= need]
    if len(usable) < way:
        raise InvalidInputError(
            f"only {len(usable)} classes have {need} instances; cannot sample a {way}-way episode"
        )
    chosen = rng.choice(usable, size=way, replace=False)
    support, query = [], []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        picked = rng.choice(members, size=need, replace=False)
        support.append(picked[:shot])
        query.append(picked[shot:])
    return Episode(chosen, np.array(support), np.array(query).reshape(way, query_per_class))
