"""Continual supervised learning: IDX data, random-label and permuted-input task sequences."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import BaselineConfig, l2_init_penalty, weight_clip
from .churn import ChainState, ChurnConfig, chain_step
from .errors import ConfigurationError, DimensionError, FormatError, LengthError
from .nn import MLPConfig, Network, backward, forward, init_network, log_softmax
from .optim import Optimizer

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
TASK_KINDS = ("random_label", "permuted")
PLUGINS = ("none", "chain", "l2_init", "weight_clip")
FIXTURE_IMAGES = "digits16-images.idx"
FIXTURE_LABELS = "digits16-labels.idx"


@dataclass
class Dataset:
    images: np.ndarray  # (count, pixels) in [0, 1]
    labels: np.ndarray
    classes: int = 10
    shape: tuple = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise DimensionError("images must be a (count, pixels) matrix")
        if len(self.images) != len(self.labels):
            raise LengthError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.images)) or self.images.min(initial=0) < 0 or self.images.max(initial=0) > 1:
            raise DimensionError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DimensionError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------- IDX files

def _read(path) -> bytes:
    return Path(path).read_bytes()


def parse_idx_images(raw: bytes) -> np.ndarray:
    """``(count, rows, cols)`` unsigned bytes from an IDX3 blob."""
    if len(raw) < 16:
        raise LengthError("image file shorter than its header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGES_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x}")
    need = count * rows * cols
    if len(raw) - 16 < need:
        raise LengthError(f"image file truncated: {len(raw) - 16} of {need} pixel bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=16).reshape(count, rows, cols)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise LengthError("label file shorter than its header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABELS_MAGIC:
        raise FormatError(f"bad label magic 0x{magic:08x}")
    if len(raw) - 8 < count:
        raise LengthError(f"label file truncated: {len(raw) - 8} of {count} labels")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled by 1/255."""
    imgs = parse_idx_images(_read(images_path))
    labels = parse_idx_labels(_read(labels_path))
    if len(imgs) != len(labels):
        raise LengthError(f"{len(imgs)} images but {len(labels)} labels")
    flat = imgs.reshape(len(imgs), -1).astype(np.float64) / 255.0
    return Dataset(flat, labels, classes, tuple(imgs.shape[1:]))


def idx_bytes(images_u8: np.ndarray, labels) -> tuple:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    if images_u8.ndim != 3:
        raise DimensionError("images must be (count, rows, cols)")
    labels = np.asarray(labels, dtype=np.uint8)
    img = struct.pack(">IIII", IMAGES_MAGIC, *images_u8.shape) + images_u8.tobytes()
    lab = struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes()
    return img, lab


def write_idx(images_path, labels_path, images_u8, labels) -> None:
    img, lab = idx_bytes(images_u8, labels)
    Path(images_path).write_bytes(img)
    Path(labels_path).write_bytes(lab)


# ---------------------------------------------------------------- fixture

# seven-segment strokes on a unit box: (x0, y0, x1, y1), y pointing down
_SEGMENTS = {
    "a": (0.0, 0.0, 1.0, 0.0), "b": (1.0, 0.0, 1.0, 0.5), "c": (1.0, 0.5, 1.0, 1.0),
    "d": (0.0, 1.0, 1.0, 1.0), "e": (0.0, 0.5, 0.0, 1.0), "f": (0.0, 0.0, 0.0, 0.5),
    "g": (0.0, 0.5, 1.0, 0.5),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


def _render_digit(digit: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    w = rng.uniform(0.35, 0.5) * size
    h = rng.uniform(0.55, 0.7) * size
    cx = size / 2 + rng.uniform(-1.5, 1.5)
    cy = size / 2 + rng.uniform(-1.5, 1.5)
    slant = rng.uniform(-0.25, 0.25)
    width = rng.uniform(0.8, 1.4)
    img = np.zeros((size, size))
    for seg in _DIGITS[digit]:
        x0, y0, x1, y1 = _SEGMENTS[seg]
        p0 = np.array([cx + (x0 - 0.5) * w + slant * (y0 - 0.5) * h, cy + (y0 - 0.5) * h])
        p1 = np.array([cx + (x1 - 0.5) * w + slant * (y1 - 0.5) * h, cy + (y1 - 0.5) * h])
        d = p1 - p0
        t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / (d @ d), 0.0, 1.0)
        dist = np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1]))
        img = np.maximum(img, np.clip(1.5 - dist / width, 0.0, 1.0))
    img = np.clip(img + rng.normal(0.0, 0.05, img.shape), 0.0, 1.0)
    return img


def generate_fixture(count: int = 2000, size: int = 16, seed: int = 0) -> tuple:
    """Synthetic seven-segment style digits as ``(uint8 images, labels)``."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 10
    rng.shuffle(labels)
    images = np.stack([_render_digit(int(d), size, rng) for d in labels])
    return np.round(images * 255).astype(np.uint8), labels.astype(np.uint8)


def load_fixture() -> Dataset:
    """The bundled 16x16 digit-like dataset (2000 images)."""
    data = resources.files("churnlab") / "data"
    imgs = parse_idx_images((data / FIXTURE_IMAGES).read_bytes())
    labels = parse_idx_labels((data / FIXTURE_LABELS).read_bytes())
    flat = imgs.reshape(len(imgs), -1).astype(np.float64) / 255.0
    return Dataset(flat, labels, 10, tuple(imgs.shape[1:]))


# ---------------------------------------------------------------- task sequences

@dataclass
class SLTaskSpec:
    kind: str
    subset_indices: np.ndarray
    label_map: Optional[np.ndarray] = None  # random_label: one label per subset entry
    pixel_permutation: Optional[np.ndarray] = None
    epochs_per_task: int = 1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        if self.pixel_permutation is not None:
            p = np.asarray(self.pixel_permutation)
            if not np.array_equal(np.sort(p), np.arange(p.size)):
                raise ConfigurationError("pixel_permutation is not a bijection")
        if self.epochs_per_task < 1:
            raise ConfigurationError("epochs_per_task must be >= 1")


DESK_EPOCHS = {"random_label": 100, "permuted": 1}
DESK_TASKS = {"random_label": 10, "permuted": 50}
PAPER_PER_TASK_N = {"random_label": 1200, "permuted": 10000}


def make_sl_sequence(dataset: Dataset, kind: str, num_tasks: Optional[int] = None,
                     per_task_n: Optional[int] = None, seed=0,
                     epochs_per_task: Optional[int] = None) -> list:
    """Fresh subset per task; fresh random labels (random_label) or a fresh pixel permutation (permuted)."""
    if kind not in TASK_KINDS:
        raise ConfigurationError(f"unknown task kind {kind!r}")
    num_tasks = DESK_TASKS[kind] if num_tasks is None else int(num_tasks)
    per_task_n = min(PAPER_PER_TASK_N[kind], len(dataset)) if per_task_n is None else int(per_task_n)
    epochs = DESK_EPOCHS[kind] if epochs_per_task is None else int(epochs_per_task)
    if num_tasks < 1:
        raise ConfigurationError("num_tasks must be >= 1")
    if not 1 <= per_task_n <= len(dataset):
        raise ConfigurationError(f"per_task_n={per_task_n} exceeds the dataset size {len(dataset)}")
    rng = np.random.default_rng(seed)
    n_pixels = dataset.images.shape[1]
    tasks = []
    for _ in range(num_tasks):
        subset = np.sort(rng.choice(len(dataset), size=per_task_n, replace=False))
        if kind == "random_label":
            labels = rng.integers(dataset.classes, size=per_task_n)
            tasks.append(SLTaskSpec(kind, subset, label_map=labels, epochs_per_task=epochs))
        else:
            tasks.append(SLTaskSpec(kind, subset, pixel_permutation=rng.permutation(n_pixels),
                                    epochs_per_task=epochs))
    return tasks


def task_data(dataset: Dataset, task: SLTaskSpec) -> tuple:
    X = dataset.images[task.subset_indices]
    if task.pixel_permutation is not None:
        X = X[:, task.pixel_permutation]
    y = task.label_map if task.label_map is not None else dataset.labels[task.subset_indices]
    return X, np.asarray(y, dtype=np.int64)


# ---------------------------------------------------------------- training

def cross_entropy_and_grad(net: Network, X, y):
    """Mean softmax cross-entropy, its parameter gradient and the batch logits."""
    out = forward(net, X)
    logp = log_softmax(out.outputs)
    rows = np.arange(len(y))
    loss = -float(np.mean(logp[rows, y]))
    d = np.exp(logp)
    d[rows, y] -= 1.0
    return loss, backward(net, out, d), out.outputs


@dataclass
class SLConfig:
    hidden: tuple = (256, 256)
    activation: str = "relu"
    lr: float = 1e-3
    batch: int = 32
    plugin: str = "none"
    churn: ChurnConfig = field(default_factory=lambda: ChurnConfig(output_mode="raw"))
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        if self.plugin not in PLUGINS:
            raise ConfigurationError(f"unknown plugin {self.plugin!r}")
        if self.batch < 1 or self.lr <= 0:
            raise ConfigurationError("batch must be >= 1 and lr > 0")


@dataclass
class SLTrace:
    task_accuracy: np.ndarray  # online training accuracy per task
    epoch_accuracy: list       # per task: online accuracy of each epoch
    epoch_loss: list
    lambdas: list

    @property
    def average_accuracy(self) -> float:
        return float(np.mean(self.task_accuracy))


def make_classifier(dataset: Dataset, config: SLConfig, seed) -> Network:
    sizes = (dataset.images.shape[1], *config.hidden, dataset.classes)
    return init_network(MLPConfig(sizes, activation=config.activation), seed)


def train_sl(net: Network, sequence, optimizer: Optimizer, plugin: str, config: SLConfig,
             dataset: Dataset, rng, chain_state: Optional[ChainState] = None, on_epoch=None) -> SLTrace:
    """Minibatch cross-entropy over the task sequence with one plasticity plug-in.

    Online accuracy is measured on each training minibatch before its update.
    The reference batch for ``chain`` is drawn from the current task's data,
    disjoint from the training minibatch. ``on_epoch(epoch, accuracy, loss,
    mean_lambda)`` is called after every epoch.
    """
    if plugin not in PLUGINS:
        raise ConfigurationError(f"unknown plugin {plugin!r}")
    if net.config.output_dim != dataset.classes:
        raise DimensionError(f"network has {net.config.output_dim} outputs for {dataset.classes} classes")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if chain_state is None and plugin == "chain":
        chain_state = ChainState()
    kappa = config.baseline.clip_kappa
    task_acc, epoch_acc, epoch_loss, lambdas = [], [], [], []
    for task in sequence:
        X, y = task_data(dataset, task)
        n = len(y)
        accs, losses = [], []
        for _ in range(task.epochs_per_task):
            perm = rng.permutation(n)
            correct, total, loss_sum, steps = 0, 0, 0.0, 0
            epoch_lams = []
            for start in range(0, n, config.batch):
                idx = np.sort(perm[start:start + config.batch])
                holder = {}

                def main_loss_fn(net_, idx=idx, holder=holder):
                    loss, g, logits = cross_entropy_and_grad(net_, X[idx], y[idx])
                    holder["correct"] = int(np.sum(np.argmax(logits, axis=1) == y[idx]))
                    if plugin == "l2_init":
                        g = g + l2_init_penalty(net_.params, net_.init_params, config.baseline.l2_coeff)[1]
                    return loss, g

                if plugin == "chain" and n > len(idx):
                    mask = np.ones(n, dtype=bool)
                    mask[idx] = False
                    pool = np.flatnonzero(mask)
                    ref_n = config.churn.ref_batch_size or config.batch
                    ref_idx = np.sort(rng.choice(pool, size=min(ref_n, pool.size), replace=False))
                    st = chain_step(net, optimizer, idx, ref_idx, X[ref_idx], main_loss_fn,
                                    config.churn, chain_state)
                    loss = st["L_main"]
                    epoch_lams.append(st["lambda"])
                else:
                    loss, g = main_loss_fn(net)
                    new = optimizer.step(net.params, g)
                    if plugin == "weight_clip":
                        new = weight_clip(new, kappa)
                    net.set_params(new)
                correct += holder["correct"]
                total += len(idx)
                loss_sum += loss
                steps += 1
            accs.append(correct / total)
            losses.append(loss_sum / steps)
            lambdas.extend(epoch_lams)
            if on_epoch is not None:
                on_epoch(len(accs) - 1, accs[-1], losses[-1], float(np.mean(epoch_lams)) if epoch_lams else None)
        epoch_acc.append(accs)
        epoch_loss.append(losses)
        task_acc.append(float(np.mean(accs)))
    return SLTrace(np.array(task_acc), epoch_acc, epoch_loss, lambdas)
