"""Static (input-independent) mergers: AvgMean, Task Arithmetic, RegMean.

Every reduction over models runs in float64 over a canonical model order
(sorted by content digest), so results do not depend on how the caller
ordered the list.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from vitmerge import ConfigError, MergeError, SingularSystemError
from vitmerge import numkit, vit
from vitmerge.data import Dataset
from vitmerge.vit import ViTParams

METHODS = ("avgmean", "taskarith", "regmean")


@dataclass(frozen=True)
class MergeRecipe:
    method: str = "regmean"
    lam: float = 0.5
    alpha: float = 0.9
    classifier_choice: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown static merge method {self.method!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")


@dataclass
class GramStats:
    """Accumulated ``X^T X`` (float64) and row counts per linear weight name."""

    grams: Dict[str, np.ndarray] = field(default_factory=dict)
    samples: Dict[str, int] = field(default_factory=dict)

    def __add__(self, other: "GramStats") -> "GramStats":
        if set(self.grams) != set(other.grams):
            raise MergeError("cannot add gram stats over different layer sets")
        return GramStats({n: self.grams[n] + other.grams[n] for n in self.grams},
                         {n: self.samples[n] + other.samples[n] for n in self.samples})

    def names(self) -> List[str]:
        return list(self.grams)

    def check(self) -> None:
        for n, g in self.grams.items():
            if self.samples.get(n, 0) <= 0:
                raise MergeError(f"gram for {n} has no samples")
            if np.linalg.norm(g - g.T) > 1e-9 * max(np.linalg.norm(g), 1e-300):
                raise MergeError(f"gram for {n} is not symmetric")

    def save(self, path) -> None:
        arrays = {f"gram::{n}": g for n, g in self.grams.items()}
        arrays.update({f"samples::{n}": np.array(s, dtype=np.int64) for n, s in self.samples.items()})
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "GramStats":
        with np.load(path) as z:
            grams = {k[len("gram::"):]: z[k] for k in z.files if k.startswith("gram::")}
            samples = {k[len("samples::"):]: int(z[k]) for k in z.files if k.startswith("samples::")}
        return cls(grams, samples)


def _digest(model: ViTParams) -> str:
    h = hashlib.sha256()
    for n, a in model.items():
        if not vit.is_classifier(n):
            h.update(n.encode())
            h.update(a.tobytes())
    return h.hexdigest()


def canonical_order(models: Sequence[ViTParams]) -> List[int]:
    """Indices of ``models`` sorted by content digest (stable on ties)."""
    keys = [_digest(m) for m in models]
    return sorted(range(len(models)), key=lambda i: (keys[i], i))


def check_compatible(models: Sequence[ViTParams], base: Optional[ViTParams] = None) -> None:
    ref = base if base is not None else models[0]
    for mi, m in enumerate(models):
        vit.audit(m)
        for n, a in ref.items():
            if vit.is_classifier(n):
                continue
            if n not in m or m[n].shape != a.shape:
                got = m[n].shape if n in m else "missing"
                raise MergeError(f"model {mi}: tensor {n} has shape {got}, expected {a.shape}")


def _mean_tensor(arrays: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.array(arrays[0], dtype=np.float64)
    for a in arrays[1:]:
        acc += a
    acc /= len(arrays)
    return acc.astype(numkit.STORAGE_DTYPE)


def _assemble(template: ViTParams, body: Mapping[str, np.ndarray], head_from: ViTParams) -> ViTParams:
    tensors = dict(body)
    tensors["head.weight"], tensors["head.bias"] = head_from.classifier()
    return ViTParams(head_from.config, tensors)


def mean_tensors(models: Sequence[ViTParams], names: Iterable[str]) -> Dict[str, np.ndarray]:
    order = canonical_order(models)
    return {n: _mean_tensor([models[i][n] for i in order]) for n in names}


def body_names(model: ViTParams) -> List[str]:
    return [n for n in model if not vit.is_classifier(n)]


def avg_mean(models: Sequence[ViTParams], classifier_choice: int = 0) -> ViTParams:
    """Element-wise mean of every non-classifier tensor.

    The head is copied from ``models[classifier_choice]``.
    """
    if len(models) < 2:
        raise MergeError("avg_mean needs at least 2 models")
    check_compatible(models)
    body = mean_tensors(models, body_names(models[0]))
    return _assemble(models[0], body, models[classifier_choice])


def task_arithmetic(base: ViTParams, models: Sequence[ViTParams], lam: float,
                    classifier_choice: int = 0) -> ViTParams:
    """``W_B + lam * sum_i (W_i - W_B)`` for every non-classifier tensor."""
    if len(models) < 1:
        raise MergeError("task_arithmetic needs at least 1 model")
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    check_compatible(models, base)
    order = canonical_order(models)
    body = {}
    for n in body_names(base):
        wb = base[n].astype(np.float64)
        acc = np.zeros_like(wb)
        for i in order:
            acc += models[i][n] - wb
        body[n] = (wb + lam * acc).astype(numkit.STORAGE_DTYPE)
    return _assemble(base, body, models[classifier_choice])


def collect_grams(model: ViTParams, unlabeled: Dataset, batch_size: int = 256) -> GramStats:
    """Accumulate ``X^T X`` of every attention/MLP linear-layer input.

    Rows of ``X`` are token activations (batch x tokens) in dataset order.
    """
    if len(unlabeled) == 0:
        raise MergeError("gram collection needs a nonempty dataset")
    names = vit.linear_weight_names(model.config)
    grams = {n: np.zeros((model[n].shape[0],) * 2) for n in names}
    samples = {n: 0 for n in names}
    for i in range(0, len(unlabeled), batch_size):
        rec: dict = {}
        vit.forward(model, unlabeled.images[i:i + batch_size], record=rec)
        for n in names:
            x = rec[n[: -len(".weight")] + ".input"]
            x = x.reshape(-1, x.shape[-1]).astype(np.float64)
            grams[n] += x.T @ x
            samples[n] += x.shape[0]
    return GramStats(grams, samples)


def scale_off_diagonal(gram: np.ndarray, alpha: float) -> np.ndarray:
    out = alpha * gram
    idx = np.diag_indices_from(out)
    out[idx] = np.diag(gram)
    return out


def regmean_tensor(weights: Sequence[np.ndarray], grams: Sequence[np.ndarray], alpha: float,
                   name: str = "?") -> np.ndarray:
    """Closed-form minimiser of ``sum_i ||X_i W - X_i W_i||^2`` (float64).

    Each gram's off-diagonal entries are scaled by ``alpha`` before summing.
    """
    lhs = np.zeros_like(grams[0], dtype=np.float64)
    rhs = np.zeros((grams[0].shape[0], weights[0].shape[1]))
    for w, g in zip(weights, grams):
        gs = scale_off_diagonal(np.asarray(g, dtype=np.float64), alpha)
        lhs += gs
        rhs += numkit.matmul(gs, w)
    try:
        return numkit.solve(lhs, rhs)
    except SingularSystemError as exc:
        raise MergeError(f"RegMean system for {name} is singular: {exc}") from exc


def regmean_tensors(models: Sequence[ViTParams], grams: Sequence[GramStats], alpha: float,
                    names: Iterable[str]) -> Dict[str, np.ndarray]:
    order = canonical_order(models)
    out = {}
    for n in names:
        for i in order:
            if n not in grams[i].grams:
                raise MergeError(f"gram stats of model {i} lack layer {n}")
        w = regmean_tensor([models[i][n] for i in order], [grams[i].grams[n] for i in order], alpha, n)
        out[n] = w.astype(numkit.STORAGE_DTYPE)
    return out


def regmean(models: Sequence[ViTParams], grams: Sequence[GramStats], alpha: float = 0.9,
            classifier_choice: int = 0) -> ViTParams:
    """RegMean on attention/MLP linear weights; AvgMean for everything else.

    Biases, norms and embeddings are averaged, the head is taken from
    ``models[classifier_choice]``.
    """
    if not 0 < alpha <= 1:
        raise ConfigError("alpha must lie in (0, 1]")
    if len(models) != len(grams):
        raise MergeError("need exactly one GramStats per model")
    if len(models) < 1:
        raise MergeError("regmean needs at least 1 model")
    check_compatible(models)
    linear = set(vit.linear_weight_names(models[0].config))
    for g in grams:
        if set(g.grams) != linear:
            raise MergeError("gram stats do not cover exactly the attention/MLP linear layers")
    names = body_names(models[0])
    body = regmean_tensors(models, grams, alpha, [n for n in names if n in linear])
    body.update(mean_tensors(models, [n for n in names if n not in linear]))
    return _assemble(models[0], {n: body[n] for n in names}, models[classifier_choice])


def merge(recipe: MergeRecipe, models: Sequence[ViTParams], *, base: Optional[ViTParams] = None,
          grams: Optional[Sequence[GramStats]] = None) -> ViTParams:
    if recipe.method == "avgmean":
        return avg_mean(models, recipe.classifier_choice)
    if recipe.method == "taskarith":
        if base is None:
            raise ConfigError("task arithmetic needs the base model")
        return task_arithmetic(base, models, recipe.lam, recipe.classifier_choice)
    if grams is None:
        raise ConfigError("RegMean needs gram statistics")
    return regmean(models, grams, recipe.alpha, recipe.classifier_choice)
