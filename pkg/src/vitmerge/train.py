"""Cross-entropy training for the tiny ViT and the task gate.

Plain SGD with momentum and a cosine learning-rate schedule.  Weight decay
is part of the loss: ``0.5 * wd * sum ||W||^2`` over ``*.weight`` tensors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from vitmerge import ConfigError, DataError, TrainingError
from vitmerge import vit
from vitmerge.data import Dataset, SyntheticTaskSpec, generate, joint_dataset
from vitmerge.numkit import STORAGE_DTYPE, softmax
from vitmerge.vit import ViTConfig, ViTParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("learning_rate/weight_decay must be >= 0 and momentum in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def _decay(tensors: Mapping[str, np.ndarray], wd: float) -> float:
    if wd == 0:
        return 0.0
    return 0.5 * wd * float(sum(np.sum(np.square(a, dtype=np.float64))
                                for n, a in tensors.items() if n.endswith(".weight")))


def _vit_step(tensors, config, images, labels, wd):
    logits, cache = vit._forward(tensors, config, images, keep=True)
    loss, dlogits = cross_entropy(logits, labels)
    grads = vit.backward(_Frozen(tensors, config), images, dlogits.astype(logits.dtype), cache)
    if wd:
        for n, a in tensors.items():
            if n.endswith(".weight"):
                grads[n] = grads[n] + wd * a
    return loss + _decay(tensors, wd), grads


class _Frozen(dict):
    """Lightweight stand-in for ViTParams inside the training loop."""

    def __init__(self, tensors, config):
        super().__init__(tensors)
        self.config = config


def loss_and_grads(params: ViTParams, images: np.ndarray, labels: np.ndarray,
                   weight_decay: float = 0.0) -> Tuple[float, ViTParams]:
    if len(images) == 0:
        raise DataError("empty batch")
    loss, grads = _vit_step(dict(params), params.config, images, np.asarray(labels), weight_decay)
    return loss, ViTParams(params.config, grads, dtype=params.dtype)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


def sgd_train(tensors: Dict[str, np.ndarray], step_fn, dataset: Dataset, labels: np.ndarray,
              tc: TrainConfig, history: Optional[list] = None, what: str = "model") -> Dict[str, np.ndarray]:
    """Generic minibatch SGD; ``step_fn(tensors, x, y) -> (loss, grads)``.

    Shuffling uses ``tc.seed`` only, so runs are bitwise reproducible.
    """
    tensors = {n: np.array(a, dtype=STORAGE_DTYPE) for n, a in tensors.items()}
    velocity = {n: np.zeros_like(a) for n, a in tensors.items()}
    n = len(dataset)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total = tc.epochs * steps_per_epoch
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 104729]))
    step = 0
    mom = np.float32(tc.momentum)
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, tc.batch_size):
            idx = order[i:i + tc.batch_size]
            loss, grads = step_fn(tensors, dataset.images[idx], labels[idx])
            if not math.isfinite(loss):
                gnorm = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
                worst = sorted(gnorm.items(), key=lambda kv: -np.nan_to_num(kv[1], nan=np.inf))[:3]
                raise TrainingError(f"{what} diverged at epoch {epoch} step {step} "
                                    f"(lr {cosine_lr(tc.learning_rate, step, total):.4g}); "
                                    f"largest gradient norms {worst}")
            lr = np.float32(cosine_lr(tc.learning_rate, step, total))
            for k, g in grads.items():
                v = velocity[k]
                v *= mom
                v += g
                tensors[k] -= lr * v
            losses.append(loss)
            step += 1
        mean = float(np.mean(losses))
        if history is not None:
            history.append(mean)
        log.debug("%s epoch %d loss %.4f", what, epoch, mean)
    return tensors


def _vit_train(params: ViTParams, dataset: Dataset, labels, tc: TrainConfig, history, what) -> ViTParams:
    config = params.config
    step = lambda t, x, y: _vit_step(t, config, x, y, tc.weight_decay)
    tensors = sgd_train(dict(params), step, dataset, labels, tc, history, what)
    return ViTParams(config, tensors)


def pretrain(config: ViTConfig, tasks: Sequence[SyntheticTaskSpec], tc: TrainConfig, *,
             n_train: int = 1000, datasets: Optional[Sequence[Dataset]] = None,
             history: Optional[list] = None) -> ViTParams:
    """Train a shared base on the union of all tasks with a joint label space."""
    if len(tasks) < 2:
        raise ConfigError("pretraining needs at least 2 tasks")
    if datasets is None:
        datasets = [generate(t, "train", n_train, config.image_size, config.channels) for t in tasks]
    joint, _ = joint_dataset(datasets)
    base = vit.init(config.with_classes(joint.num_classes), tc.seed)
    if tc.epochs == 0:
        return base
    return _vit_train(base, joint, joint.labels, tc, history, "pretrain")


def finetune(base: ViTParams, task: SyntheticTaskSpec, tc: TrainConfig, *,
             n_train: int = 1000, dataset: Optional[Dataset] = None,
             history: Optional[list] = None) -> ViTParams:
    """Fine-tune every parameter on one task after re-initialising the head."""
    vit.audit(base)
    config = base.config
    if dataset is None:
        dataset = generate(task, "train", n_train, config.image_size, config.channels)
    w, b = vit.init_classifier(config, task.num_classes, tc.seed + 7 * task.task_id)
    start = base.with_classifier(w, b)
    if tc.epochs == 0:
        return start
    return _vit_train(start, dataset, dataset.labels, tc, history, f"finetune[{task.task_id}]")


def accuracy(params: ViTParams, dataset: Dataset) -> float:
    return float(np.mean(vit.predict(params, dataset.images) == dataset.labels))


# ---------------------------------------------------------------- gate


@dataclass(frozen=True)
class GateConfig:
    input_shape: Tuple[int, int, int] = (1, 16, 16)
    num_tasks: int = 3
    hidden: Tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.num_tasks < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("gate widths must be positive")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))

    @property
    def widths(self) -> List[int]:
        return [int(np.prod(self.input_shape)), *self.hidden, self.num_tasks]

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "num_tasks": self.num_tasks, "hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, d) -> "GateConfig":
        return cls(tuple(d["input_shape"]), int(d["num_tasks"]), tuple(d["hidden"]))


def gate_shapes(config: GateConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    w = config.widths
    for i in range(len(w) - 1):
        shapes[f"fc{i + 1}.weight"] = (w[i], w[i + 1])
        shapes[f"fc{i + 1}.bias"] = (w[i + 1],)
    return shapes


@dataclass(frozen=True, eq=False)
class GateNet:
    """Flatten -> (linear -> GELU)* -> linear(num_tasks) over the raw image.

    ``hidden`` selects the architecture; ``()`` gives a linear gate.
    """

    config: GateConfig
    tensors: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        shapes = gate_shapes(self.config)
        if set(shapes) != set(self.tensors):
            raise ConfigError("gate tensors do not match its architecture")
        frozen = {}
        for n, s in shapes.items():
            a = np.array(self.tensors[n], dtype=STORAGE_DTYPE, order="C", copy=True)
            if a.shape != s:
                raise ConfigError(f"gate tensor {n}: expected {s}, got {a.shape}")
            a.flags.writeable = False
            frozen[n] = a
        object.__setattr__(self, "tensors", frozen)

    @property
    def num_tasks(self) -> int:
        return self.config.num_tasks

    def param_count(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def flops(self) -> int:
        w = self.config.widths
        return 2 * sum(w[i] * w[i + 1] for i in range(len(w) - 1))

    def logits(self, images: np.ndarray) -> np.ndarray:
        return _gate_forward(self.tensors, self.config, images)[0]

    def equal(self, other: "GateNet") -> bool:
        return self.config == other.config and all(
            self.tensors[n].tobytes() == other.tensors[n].tobytes() for n in self.tensors)


def init_gate(config: GateConfig, seed: int) -> GateNet:
    rng = np.random.default_rng(seed)
    tensors = {}
    for n, s in gate_shapes(config).items():
        if n.endswith(".weight"):
            tensors[n] = (rng.standard_normal(s) / math.sqrt(s[0])).astype(STORAGE_DTYPE)
        else:
            tensors[n] = np.zeros(s, STORAGE_DTYPE)
    return GateNet(config, tensors)


def _gate_forward(tensors, config: GateConfig, images):
    images = np.asarray(images)
    if images.shape[1:] != tuple(config.input_shape):
        raise DataError(f"gate expects inputs of shape {config.input_shape}, got {images.shape[1:]}")
    dtype = tensors["fc1.weight"].dtype
    h = images.reshape(len(images), -1).astype(dtype, copy=False)
    layers = len(config.widths) - 1
    cache = []
    for i in range(1, layers + 1):
        u = h @ tensors[f"fc{i}.weight"] + tensors[f"fc{i}.bias"]
        if i < layers:
            g, t = vit.gelu(u)
            cache.append((h, u, t))
            h = g
        else:
            cache.append((h, None, None))
            h = u
    return h, cache


def _gate_step(tensors, config, images, labels, wd):
    logits, cache = _gate_forward(tensors, config, images)
    loss, d = cross_entropy(logits, labels)
    d = d.astype(logits.dtype)
    grads = {}
    for i in range(len(cache), 0, -1):
        h, u, t = cache[i - 1]
        if u is not None:
            d = vit.gelu_backward(d, u, t)
        grads[f"fc{i}.weight"] = h.T @ d
        grads[f"fc{i}.bias"] = d.sum(axis=0)
        d = d @ tensors[f"fc{i}.weight"].T
    if wd:
        for n, a in tensors.items():
            if n.endswith(".weight"):
                grads[n] = grads[n] + wd * a
    return loss + _decay(tensors, wd), grads


def gate_loss_and_grads(gate: GateNet, images, task_labels, weight_decay: float = 0.0):
    return _gate_step(dict(gate.tensors), gate.config, images, np.asarray(task_labels), weight_decay)


def train_gate(gate: GateNet, unlabeled: Sequence[Tuple[Dataset, int]], tc: TrainConfig,
               history: Optional[list] = None) -> GateNet:
    """Train the gate to predict which task an unlabeled image came from.

    ``unlabeled`` pairs each pool with its 1-based task id; the class label
    seen by the gate is ``task_id - 1``.
    """
    if len(unlabeled) < 2:
        raise ConfigError("gate training needs pools from at least 2 tasks")
    ids = [tid for _, tid in unlabeled]
    if sorted(ids) != list(range(1, gate.num_tasks + 1)):
        raise ConfigError(f"task ids {ids} do not cover 1..{gate.num_tasks}")
    images = np.concatenate([ds.images for ds, _ in unlabeled])
    labels = np.concatenate([np.full(len(ds), tid - 1, dtype=np.int64) for ds, tid in unlabeled])
    pool = Dataset(images, labels, "test", 0, gate.num_tasks)
    step = lambda t, x, y: _gate_step(t, gate.config, x, y, tc.weight_decay)
    tensors = sgd_train(dict(gate.tensors), step, pool, labels, tc, history, "gate")
    return GateNet(gate.config, tensors)
