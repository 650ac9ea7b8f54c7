"""Desk-scale model zoos: synthetic datasets, minibatch SGD training, and
grids of hyperparameter variations with recorded accuracies.

Generalization spread across a zoo is induced primarily through label noise
and training-subset size.  Every random draw flows from an explicit seed
through a named generator, so zoos are bit-reproducible.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .net import Dense, Network, ReLU, make_mlp, save_network
from .tensorio import DatasetSplit

EPOCH_CAP = 2000
TARGET_LOSS = 0.01


def named_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Deterministic generator derived from a base seed and a purpose tag."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(zlib.crc32(tag.encode()))
        else:
            entropy.append(int(tag) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass
class DatasetConfig:
    generator: str  # "blobs" | "annuli"
    ambient_dim: int
    signal_dim: int
    noise_std: float
    train_samples: int
    test_samples: int
    num_classes: int = 2

    def validate(self) -> None:
        if self.generator not in ("blobs", "annuli"):
            raise ConfigError(f"unknown dataset generator {self.generator!r}")
        if self.signal_dim < 1 or self.signal_dim > self.ambient_dim:
            raise ConfigError("need 1 <= signal_dim <= ambient_dim")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.train_samples < 2 or self.test_samples < 1:
            raise ConfigError("need at least 2 train and 1 test samples")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")


def _blob_centers(cfg: DatasetConfig, rng) -> np.ndarray:
    centers = rng.normal(0.0, 1.0, size=(cfg.num_classes, cfg.signal_dim))
    if cfg.num_classes <= cfg.signal_dim:
        # Orthogonalize so every pair of centers is 4*sqrt(2) apart.
        q, _ = np.linalg.qr(centers.T)
        centers = q.T[: cfg.num_classes]
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    return 4.0 * centers / np.maximum(norms, 1e-12)


def _raw_samples(
    cfg: DatasetConfig, count: int, rng, centers: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, cfg.num_classes, size=count)
    x = np.zeros((count, cfg.ambient_dim))
    if cfg.generator == "blobs":
        x[:, : cfg.signal_dim] = centers[labels]
    else:  # annuli: concentric shells of radius 1, 2, ... in the signal coords
        directions = rng.normal(0.0, 1.0, size=(count, cfg.signal_dim))
        directions /= np.maximum(
            np.linalg.norm(directions, axis=1, keepdims=True), 1e-12
        )
        radii = (labels + 1).astype(np.float64)
        x[:, : cfg.signal_dim] = radii[:, None] * directions
    x += cfg.noise_std * rng.normal(0.0, 1.0, size=x.shape)
    return x, labels


def make_synthetic_dataset(
    cfg: DatasetConfig, seed: int
) -> tuple[DatasetSplit, DatasetSplit]:
    """Generate a normalized (train, test) pair; deterministic given the seed.

    Features are mean-centered per feature and scaled by a single pooled
    standard deviation, so the relative variance structure across features
    (signal versus low-variance noise coordinates) survives normalization.
    Bounds are each split's observed post-normalization min/max.
    """
    cfg.validate()
    centers = None
    if cfg.generator == "blobs":
        centers = _blob_centers(cfg, named_rng(seed, "centers"))
    train_raw, train_labels = _raw_samples(
        cfg, cfg.train_samples, named_rng(seed, "train"), centers
    )
    test_raw, test_labels = _raw_samples(
        cfg, cfg.test_samples, named_rng(seed, "test"), centers
    )
    mean = train_raw.mean(axis=0)
    pooled_std = float(train_raw.std(axis=0).mean())
    if pooled_std < 1e-12:
        pooled_std = 1.0
    std = np.full(cfg.ambient_dim, pooled_std)
    splits = []
    for raw, labels in ((train_raw, train_labels), (test_raw, test_labels)):
        inputs = (raw - mean) / std
        split = DatasetSplit(
            inputs=inputs,
            labels=labels.astype(np.int64),
            mean=mean,
            std=std,
            lower=inputs.min(axis=0),
            upper=inputs.max(axis=0),
            num_classes=cfg.num_classes,
        )
        split.validate()
        splits.append(split)
    return splits[0], splits[1]


@dataclass
class HyperParams:
    depth: int
    width: int
    learning_rate: float
    batch_size: int
    weight_decay: float
    label_noise_fraction: float
    train_subset_size: int
    seed: int

    def validate(self) -> None:
        if min(self.depth, self.width, self.batch_size, self.train_subset_size) < 1:
            raise ConfigError("depth/width/batch_size/train_subset_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0.0 <= self.label_noise_fraction <= 1.0:
            raise ConfigError("label_noise_fraction must lie in [0, 1]")

    def model_id(self) -> str:
        return (
            f"d{self.depth}_w{self.width}_lr{self.learning_rate:g}"
            f"_b{self.batch_size}_wd{self.weight_decay:g}"
            f"_n{self.label_noise_fraction:g}_s{self.train_subset_size}"
            f"_seed{self.seed}"
        )


@dataclass
class ZooEntry:
    model_id: str
    hyperparams: HyperParams
    network: Network | None
    manifest_path: str | None
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    failed: bool = False

    @property
    def gap(self) -> float:
        return self.train_accuracy - self.test_accuracy


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _forward_batch(net: Network, x: np.ndarray):
    caches = []
    value = x
    for layer in net.layers:
        caches.append(value)
        value = layer.forward(value)
    return caches, value


def evaluate(net: Network, inputs: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and accuracy over a batch."""
    _, logits = _forward_batch(net, inputs)
    probs = _softmax(logits)
    picked = probs[np.arange(len(labels)), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    return loss, accuracy


def _apply_label_noise(labels: np.ndarray, fraction: float, num_classes: int, rng):
    noisy = labels.copy()
    count = int(np.floor(fraction * len(labels)))
    if count == 0:
        return noisy
    picked = rng.choice(len(labels), size=count, replace=False)
    shift = rng.integers(1, num_classes, size=count)
    noisy[picked] = (noisy[picked] + shift) % num_classes
    return noisy


def train_model(
    train_split: DatasetSplit, test_split: DatasetSplit, hp: HyperParams
) -> ZooEntry:
    """Minibatch SGD with cross-entropy until the loss target or epoch cap.

    Label noise is applied to the training labels only, before training.
    A diverged run (non-finite loss) is returned marked failed.
    """
    hp.validate()
    subset_rng = named_rng(hp.seed, "subset")
    order = subset_rng.permutation(train_split.num_samples)
    subset = order[: min(hp.train_subset_size, train_split.num_samples)]
    inputs = train_split.inputs[subset]
    clean_labels = train_split.labels[subset]
    labels = _apply_label_noise(
        clean_labels, hp.label_noise_fraction, train_split.num_classes,
        named_rng(hp.seed, "label-noise"),
    )

    net = make_mlp(
        train_split.num_features,
        [hp.width] * hp.depth,
        train_split.num_classes,
        named_rng(hp.seed, "init"),
    )
    epoch_rng = named_rng(hp.seed, "epochs")
    n = len(labels)
    failed = False
    train_loss = float("inf")
    for _ in range(EPOCH_CAP):
        perm = epoch_rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            batch = perm[start : start + hp.batch_size]
            xb, yb = inputs[batch], labels[batch]
            caches, logits = _forward_batch(net, xb)
            probs = _softmax(logits)
            grad = probs
            grad[np.arange(len(yb)), yb] -= 1.0
            grad /= len(yb)
            for idx in range(len(net.layers) - 1, -1, -1):
                layer = net.layers[idx]
                if isinstance(layer, Dense):
                    dw, db = layer.param_grads(grad, caches[idx])
                    grad = layer.backward(grad, caches[idx])
                    layer.weight -= hp.learning_rate * (dw + hp.weight_decay * layer.weight)
                    layer.bias -= hp.learning_rate * db
                elif isinstance(layer, ReLU):
                    grad = layer.backward(grad, caches[idx])
                else:
                    grad = layer.backward(grad, caches[idx])
        train_loss, _ = evaluate(net, inputs, labels)
        if not np.isfinite(train_loss):
            failed = True
            break
        if train_loss <= TARGET_LOSS:
            break

    if failed:
        return ZooEntry(hp.model_id(), hp, None, None, float("nan"), 0.0, 0.0, failed=True)
    train_loss, train_accuracy = evaluate(net, inputs, labels)
    _, test_accuracy = evaluate(net, test_split.inputs, test_split.labels)
    return ZooEntry(
        model_id=hp.model_id(),
        hyperparams=hp,
        network=net,
        manifest_path=None,
        train_loss=train_loss,
        train_accuracy=train_accuracy,
        test_accuracy=test_accuracy,
    )


ZOO_COLUMNS = (
    "model_id",
    "depth",
    "width",
    "learning_rate",
    "batch_size",
    "weight_decay",
    "label_noise_fraction",
    "train_subset_size",
    "seed",
    "train_loss",
    "train_accuracy",
    "test_accuracy",
    "gap",
)


def build_zoo(
    grid: list[HyperParams],
    train_split: DatasetSplit,
    test_split: DatasetSplit,
    out_dir: str | Path | None = None,
) -> list[ZooEntry]:
    """Train one model per grid point; optionally persist manifests + metadata."""
    if not grid:
        raise ConfigError("hyperparameter grid is empty")
    entries = []
    for hp in grid:
        entry = train_model(train_split, test_split, hp)
        if out_dir is not None and not entry.failed:
            entry.manifest_path = str(
                save_network(entry.network, Path(out_dir) / "models", entry.model_id)
            )
        entries.append(entry)
    converged = [e for e in entries if not e.failed]
    if not converged:
        raise NumericError("every zoo entry diverged")
    if out_dir is not None:
        write_zoo_csv(Path(out_dir) / "zoo.csv", entries)
    return entries


def write_zoo_csv(path: str | Path, entries: list[ZooEntry]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ZOO_COLUMNS)
        for e in entries:
            hp = e.hyperparams
            writer.writerow(
                [
                    e.model_id,
                    hp.depth,
                    hp.width,
                    repr(hp.learning_rate),
                    hp.batch_size,
                    repr(hp.weight_decay),
                    repr(hp.label_noise_fraction),
                    hp.train_subset_size,
                    hp.seed,
                    repr(e.train_loss),
                    repr(e.train_accuracy),
                    repr(e.test_accuracy),
                    repr(e.gap),
                ]
            )


def save_entry_metadata(entry: ZooEntry, path: str | Path) -> None:
    payload = {
        "model_id": entry.model_id,
        "hyperparams": asdict(entry.hyperparams),
        "manifest_path": entry.manifest_path,
        "train_loss": entry.train_loss,
        "train_accuracy": entry.train_accuracy,
        "test_accuracy": entry.test_accuracy,
        "failed": entry.failed,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_entry_metadata(path: str | Path) -> ZooEntry:
    payload = json.loads(Path(path).read_text())
    return ZooEntry(
        model_id=payload["model_id"],
        hyperparams=HyperParams(**payload["hyperparams"]),
        network=None,
        manifest_path=payload["manifest_path"],
        train_loss=payload["train_loss"],
        train_accuracy=payload["train_accuracy"],
        test_accuracy=payload["test_accuracy"],
        failed=payload["failed"],
    )
