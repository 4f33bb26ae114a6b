"""Gating-based merging with similarity-controlled layer selection.

A gate maps an input image to task probabilities ``p``.  Every tensor in a
gated group is merged per input as ``sum_i p_i W_i`` and the classifier of
the most probable task is used.  Which attention/MLP blocks are gated is
decided by pairwise weight similarity: the ``m`` least similar blocks of each
kind are gated, the rest are merged once, statically.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from vitmerge import ConfigError, GateError, MergeError
from vitmerge import merge as static
from vitmerge import numkit, vit
from vitmerge.numkit import cosine_similarity, softmax
from vitmerge.vit import ViTParams

# (attention aggregation, MLP aggregation)
STRATEGIES = {
    "concat-combined": ("concat", "combined"),
    "concat-separate": ("concat", "separate"),
    "separate-combined": ("separate", "combined"),
    "separate-separate": ("separate", "separate"),
}
DEFAULT_STRATEGY = "concat-combined"
ALWAYS_GATED = ("embedding", "norm", "classifier")
STATIC_METHODS = ("avgmean", "regmean")


def gate_probs(gate, x: np.ndarray) -> np.ndarray:
    """``softmax(G(x))`` for one image ``(C, H, W)`` or a batch."""
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    try:
        logits = np.asarray(gate.logits(x), dtype=np.float64)
    except Exception as exc:  # shape errors from arbitrary gate implementations
        raise GateError(f"gate could not score input of shape {x.shape[1:]}: {exc}") from exc
    if logits.ndim != 2 or logits.shape[0] != len(x):
        raise GateError(f"gate returned logits of shape {logits.shape}")
    p = softmax(logits, axis=-1)
    return p[0] if single else p


def select_task(p: np.ndarray) -> int:
    """0-based index of the most probable task; ties go to the lowest index."""
    return int(np.argmax(p))


# ---------------------------------------------------------------- similarity


@dataclass(frozen=True)
class SimilarityReport:
    attn: Dict[int, float]
    mlp: Dict[int, float]
    strategy: str = DEFAULT_STRATEGY
    num_models: int = 2

    def to_json(self) -> dict:
        blocks = sorted(self.attn)
        return {
            "strategy": self.strategy,
            "num_models": self.num_models,
            "blocks": {str(b): {"attention": self.attn[b], "mlp": self.mlp[b]} for b in blocks},
        }

    @classmethod
    def from_json(cls, d: dict) -> "SimilarityReport":
        blocks = d["blocks"]
        return cls({int(b): float(v["attention"]) for b, v in blocks.items()},
                   {int(b): float(v["mlp"]) for b, v in blocks.items()},
                   d["strategy"], int(d["num_models"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _attn_mats(model: ViTParams, b: int) -> List[np.ndarray]:
    return [model[f"blocks.{b}.attn.{lin}.weight"] for lin in vit.ATTN_LINEARS]


def _mlp_mats(model: ViTParams, b: int) -> List[np.ndarray]:
    return [model[f"blocks.{b}.mlp.{lin}.weight"] for lin in vit.MLP_LINEARS]


def pairwise_similarity(vectors: Sequence[np.ndarray]) -> float:
    """Sum of cosine similarities over all unordered pairs."""
    total = 0.0
    for i, j in itertools.combinations(range(len(vectors)), 2):
        total += cosine_similarity(vectors[i], vectors[j])
    return total


def _module_score(per_model: Sequence[List[np.ndarray]], mode: str) -> float:
    if mode in ("concat", "combined"):
        return pairwise_similarity([np.concatenate([m.ravel() for m in mats]) for mats in per_model])
    # one score per matrix, averaged so every strategy shares the same range
    k = len(per_model[0])
    return sum(pairwise_similarity([mats[j] for mats in per_model]) for j in range(k)) / k


def similarity(models: Sequence[ViTParams], strategy: str = DEFAULT_STRATEGY) -> SimilarityReport:
    """Per-block attention and MLP similarity across ``models`` (biases excluded).

    Models are put in canonical order first so the report is exactly
    invariant to the order of ``models``.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown similarity strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
    if len(models) < 2:
        raise MergeError("similarity needs at least 2 models")
    static.check_compatible(models)
    attn_mode, mlp_mode = STRATEGIES[strategy]
    ordered = [models[i] for i in static.canonical_order(models)]
    attn, mlp = {}, {}
    for b in range(1, ordered[0].config.depth + 1):
        attn[b] = _module_score([_attn_mats(m, b) for m in ordered], attn_mode)
        mlp[b] = _module_score([_mlp_mats(m, b) for m in ordered], mlp_mode)
    return SimilarityReport(attn, mlp, strategy, len(models))


# ---------------------------------------------------------------- plan


@dataclass(frozen=True)
class MergePlan:
    m: int
    gated_attention: FrozenSet[int]
    gated_mlp: FrozenSet[int]
    static_method: str = "regmean"
    depth: int = 4

    def gated_groups(self) -> FrozenSet[str]:
        groups = set(ALWAYS_GATED)
        groups |= {f"attention.{b}" for b in self.gated_attention}
        groups |= {f"mlp.{b}" for b in self.gated_mlp}
        return frozenset(groups)

    def threshold(self, report: SimilarityReport) -> Tuple[Optional[float], Optional[float]]:
        """Largest gated score per kind (the equivalent similarity threshold)."""
        ta = max((report.attn[b] for b in self.gated_attention), default=None)
        tm = max((report.mlp[b] for b in self.gated_mlp), default=None)
        return ta, tm

    def to_json(self) -> dict:
        return {"m": self.m, "gated_attention": sorted(self.gated_attention),
                "gated_mlp": sorted(self.gated_mlp), "static_method": self.static_method,
                "depth": self.depth}

    @classmethod
    def from_json(cls, d: dict) -> "MergePlan":
        return cls(int(d["m"]), frozenset(d["gated_attention"]), frozenset(d["gated_mlp"]),
                   d["static_method"], int(d["depth"]))


def lowest(scores: Dict[int, float], m: int) -> FrozenSet[int]:
    ranked = sorted(scores, key=lambda b: (scores[b], b))
    return frozenset(ranked[:m])


def plan_from_m(report: SimilarityReport, m: int, static_method: str = "regmean") -> MergePlan:
    if static_method not in STATIC_METHODS:
        raise ConfigError(f"static method must be one of {STATIC_METHODS}")
    if m < 0:
        raise ConfigError("m must be >= 0")
    depth = len(report.attn)
    if m > depth:
        warnings.warn(f"m={m} exceeds depth {depth}; clamped", stacklevel=2)
        m = depth
    return MergePlan(m, lowest(report.attn, m), lowest(report.mlp, m), static_method, depth)


# ---------------------------------------------------------------- merged model


@dataclass(frozen=True, eq=False)
class MergedModel:
    models: Tuple[ViTParams, ...]
    gate: object
    plan: MergePlan
    static_cache: Dict[str, np.ndarray]
    classifiers: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    gated_names: Tuple[str, ...] = field(default=())

    @property
    def num_tasks(self) -> int:
        return len(self.models)

    def param_count(self) -> int:
        n = len(self.models)
        gated = sum(self.models[0][name].size for name in self.gated_names)
        heads = sum(w.size + b.size for w, b in self.classifiers)
        cache = sum(a.size for a in self.static_cache.values())
        return int(cache + n * gated + self.gate.param_count() + heads)

    def flops(self) -> int:
        widest = max(b.size for _, b in self.classifiers)
        return int(self.gate.flops() + vit.flops_estimate(self.models[0].config.with_classes(widest)))

    def assemble(self, p: np.ndarray) -> ViTParams:
        """Full ViT for task probabilities ``p``."""
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (self.num_tasks,):
            raise GateError(f"expected {self.num_tasks} probabilities, got shape {p.shape}")
        tensors = dict(self.static_cache)
        for name in self.gated_names:
            acc = p[0] * self.models[0][name].astype(np.float64)
            for i in range(1, self.num_tasks):
                acc += p[i] * self.models[i][name]
            tensors[name] = acc.astype(numkit.STORAGE_DTYPE)
        k = select_task(p)
        w, b = self.classifiers[k]
        tensors["head.weight"], tensors["head.bias"] = w, b
        return ViTParams(self.models[k].config, tensors)


def build(models: Sequence[ViTParams], gate, plan: MergePlan,
          grams: Optional[Sequence[static.GramStats]] = None, alpha: float = 0.9) -> MergedModel:
    """Pre-merge every non-gated group once and keep per-model gated tensors."""
    if len(models) < 1:
        raise MergeError("build needs at least one model")
    if gate.num_tasks != len(models):
        raise ConfigError(f"gate predicts {gate.num_tasks} tasks but {len(models)} models were given")
    if plan.depth != models[0].config.depth:
        raise ConfigError("plan depth does not match the models")
    static.check_compatible(models)
    gated_groups = plan.gated_groups()
    body = static.body_names(models[0])
    gated = [n for n in body if vit.group_of(n) in gated_groups]
    rest = [n for n in body if vit.group_of(n) not in gated_groups]
    if plan.static_method == "regmean":
        if grams is None:
            raise ConfigError("RegMean static merging needs gram statistics")
        if len(grams) != len(models):
            raise MergeError("need exactly one GramStats per model")
        linear = set(vit.linear_weight_names(models[0].config))
        cache = static.regmean_tensors(models, grams, alpha, [n for n in rest if n in linear])
        cache.update(static.mean_tensors(models, [n for n in rest if n not in linear]))
    else:
        cache = static.mean_tensors(models, rest)
    for a in cache.values():
        a.flags.writeable = False
    return MergedModel(tuple(models), gate, plan, {n: cache[n] for n in rest},
                       tuple(m.classifier() for m in models), tuple(gated))


def infer(mm: MergedModel, x: np.ndarray) -> Tuple[np.ndarray, int]:
    """Logits for one image and the 0-based task whose classifier produced them."""
    p = gate_probs(mm.gate, x)
    params = mm.assemble(p)
    return vit.forward(params, np.asarray(x)[None])[0], select_task(p)


def predict(mm: MergedModel, images: np.ndarray, share_probs: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Selected task and predicted class for every image.

    With ``share_probs`` one ``P(x)`` (the batch mean) is used for the whole
    batch; by default each input is merged separately.
    """
    probs = gate_probs(mm.gate, images)
    if share_probs:
        p = probs.mean(axis=0)
        params = mm.assemble(p)
        k = select_task(p)
        return np.full(len(images), k), vit.predict(params, images)
    tasks = np.empty(len(images), dtype=np.int64)
    classes = np.empty(len(images), dtype=np.int64)
    for i, (img, p) in enumerate(zip(images, probs)):
        params = mm.assemble(p)
        tasks[i] = select_task(p)
        classes[i] = int(np.argmax(vit.forward(params, img[None])[0]))
    return tasks, classes
