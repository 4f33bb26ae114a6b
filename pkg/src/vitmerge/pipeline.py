"""On-disk experiment pipeline.

One :class:`Run` per (config, seed).  Stages write their artifacts under
``<out_dir>/seed_<seed>/`` and read upstream artifacts from there, failing
with :class:`MissingArtifactError` when one is absent::

    data/task<k>_<split>.npz     gen-data
    models/base.ckpt             pretrain
    models/task<k>.ckpt          finetune (shared base)
    models/scratch<k>.ckpt       finetune --from-scratch
    gate/gate.ckpt, pools.json   train-gate
    grams/<lineage><k>.npz       grams
    similarity/<strategy>.json   similarity
    merged/<name>.*              merge
    evals/<name>.json            eval
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from vitmerge import VitMergeError, checkpoint, gate as gating, merge, train, vit
from vitmerge.config import ExperimentConfig, derive_seed
from vitmerge.data import Dataset, SyntheticTaskSpec, gate_split, generate
from vitmerge.merge import GramStats
from vitmerge.vit import ViTParams

log = logging.getLogger(__name__)

LINEAGE_PREFIX = {"pretrained": "task", "from-scratch": "scratch"}


class MissingArtifactError(VitMergeError, FileNotFoundError):
    pass


def dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_json(path: Path):
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}; run the upstream command first")
    return json.loads(path.read_text(encoding="utf-8"))


def model_name(method: str, m: Optional[int] = None, lineage: str = "pretrained") -> str:
    name = method if m is None else f"{method}_m{m}"
    return name if lineage == "pretrained" else f"{name}_scratch"


class Run:
    def __init__(self, config: ExperimentConfig, seed: int, out_dir: Optional[Path] = None):
        self.config = config
        self.seed = int(seed)
        self.root = Path(out_dir or config.out_dir) / f"seed_{self.seed}"
        self.tasks: List[SyntheticTaskSpec] = config.task_specs()
        self._cache: dict = {}

    # ------------------------------------------------------------ paths

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def need(self, path: Path) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing artifact {path}; run the upstream command first")
        return path

    def data_path(self, k: int, split: str) -> Path:
        return self.path("data", f"task{k}_{split}.npz")

    def model_path(self, k: int, lineage: str = "pretrained") -> Path:
        return self.path("models", f"{LINEAGE_PREFIX[lineage]}{k}.ckpt")

    def gram_path(self, k: int, lineage: str = "pretrained") -> Path:
        return self.path("grams", f"{LINEAGE_PREFIX[lineage]}{k}.npz")

    def seed_for(self, name: str) -> int:
        return derive_seed(self.seed, name)

    # ------------------------------------------------------------ data

    def gen_data(self) -> None:
        c = self.config
        for spec in self.tasks:
            for split, n in (("train", c.data.train_per_task), ("test", c.data.test_per_task)):
                ds = generate(spec, split, n, c.model.image_size, c.model.channels)
                p = self.data_path(spec.task_id, split)
                p.parent.mkdir(parents=True, exist_ok=True)
                with open(p, "wb") as fh:
                    np.savez(fh, images=ds.images, labels=ds.labels,
                             meta=np.array(json.dumps(spec.to_dict(), sort_keys=True)))

    def dataset(self, k: int, split: str) -> Dataset:
        key = ("data", k, split)
        if key not in self._cache:
            with np.load(self.need(self.data_path(k, split))) as z:
                spec = self.tasks[k - 1]
                self._cache[key] = Dataset(z["images"], z["labels"], split, k, spec.num_classes)
        return self._cache[key]

    def pools(self) -> Tuple[List[Dataset], List[Dataset]]:
        """Unlabeled gate/gram pools (``frac`` of each test split) and held-out rest."""
        pools, rests = [], []
        for spec in self.tasks:
            pool, rest = gate_split(self.dataset(spec.task_id, "test"), self.config.gate.frac,
                                    self.seed_for("gate-pool"))
            pools.append(pool)
            rests.append(rest)
        return pools, rests

    # ------------------------------------------------------------ training

    def pretrain(self) -> ViTParams:
        c = self.config
        tc = c.train_config(c.pretrain, self.seed_for("pretrain"))
        datasets = [self.dataset(s.task_id, "train") for s in self.tasks]
        history: list = []
        base = train.pretrain(c.vit_config(), self.tasks, tc, datasets=datasets, history=history)
        joint_test = [self.dataset(s.task_id, "test") for s in self.tasks]
        acc = _joint_accuracy(base, joint_test)
        checkpoint.save_vit(self.path("models", "base.ckpt"), base, lineage="base", seed=tc.seed,
                            meta={"loss_history": history, "joint_test_accuracy": acc})
        return base

    def base(self) -> ViTParams:
        return checkpoint.load_vit(self.need(self.path("models", "base.ckpt")))[0]

    def finetune(self, from_scratch: bool = False) -> List[ViTParams]:
        c = self.config
        lineage = "from-scratch" if from_scratch else "pretrained"
        out = []
        for spec in self.tasks:
            k = spec.task_id
            section = c.scratch if from_scratch else c.finetune
            tc = c.train_config(section, self.seed_for(f"{lineage}-{k}"))
            if from_scratch:
                start = vit.init(c.vit_config(spec.num_classes), self.seed_for(f"scratch-init-{k}"))
            else:
                start = self.base()
            history: list = []
            model = train.finetune(start, spec, tc, dataset=self.dataset(k, "train"), history=history)
            acc = train.accuracy(model, self.dataset(k, "test"))
            checkpoint.save_vit(self.model_path(k, lineage), model, lineage=lineage, seed=tc.seed,
                                meta={"task_id": k, "test_accuracy": acc, "loss_history": history})
            out.append(model)
        return out

    def models(self, lineage: str = "pretrained") -> List[ViTParams]:
        return [checkpoint.load_vit(self.need(self.model_path(s.task_id, lineage)))[0] for s in self.tasks]

    def train_gate(self) -> train.GateNet:
        c = self.config
        pools, rests = self.pools()
        g0 = train.init_gate(c.gate_config(), self.seed_for("gate-init"))
        tc = c.train_config(c.gate.train, self.seed_for("gate-train"))
        history: list = []
        g = train.train_gate(g0, [(p, p.task_id) for p in pools], tc, history)
        held = gate_accuracy(g, rests)
        checkpoint.save_gate(self.path("gate", "gate.ckpt"), g, seed=tc.seed,
                             meta={"heldout_accuracy": held, "loss_history": history,
                                   "frac": c.gate.frac, "pool_sizes": [len(p) for p in pools]})
        return g

    def gate(self) -> train.GateNet:
        return checkpoint.load_gate(self.need(self.path("gate", "gate.ckpt")))[0]

    def grams(self, lineage: str = "pretrained") -> List[GramStats]:
        pools, _ = self.pools()
        out = []
        for model, pool, spec in zip(self.models(lineage), pools, self.tasks):
            g = merge.collect_grams(model, pool)
            p = self.gram_path(spec.task_id, lineage)
            p.parent.mkdir(parents=True, exist_ok=True)
            g.save(p)
            out.append(g)
        return out

    def load_grams(self, lineage: str = "pretrained") -> List[GramStats]:
        return [GramStats.load(self.need(self.gram_path(s.task_id, lineage))) for s in self.tasks]

    def similarity(self, strategy: Optional[str] = None) -> gating.SimilarityReport:
        strategy = strategy or self.config.merge.strategy
        rep = gating.similarity(self.models(), strategy)
        dump_json(self.path("similarity", f"{strategy}.json"), rep.to_json())
        return rep

    def load_similarity(self, strategy: Optional[str] = None) -> gating.SimilarityReport:
        strategy = strategy or self.config.merge.strategy
        return gating.SimilarityReport.from_json(load_json(self.path("similarity", f"{strategy}.json")))

    # ------------------------------------------------------------ merging

    def merge(self, method: str, m: Optional[int] = None, lineage: str = "pretrained",
              lam: Optional[float] = None, alpha: Optional[float] = None,
              strategy: Optional[str] = None) -> str:
        """Merge and write the artifact; returns its name."""
        c = self.config.merge
        lam = c.lam if lam is None else lam
        alpha = c.alpha if alpha is None else alpha
        models = self.models(lineage)
        members = [str(self.model_path(s.task_id, lineage).relative_to(self.root)) for s in self.tasks]
        choice = c.classifier_choice - 1
        if method.startswith("gated-"):
            static_method = method[len("gated-"):]
            rep = self.load_similarity(strategy)
            plan = gating.plan_from_m(rep, 0 if m is None else m, static_method)
            grams = self.load_grams(lineage) if static_method == "regmean" else None
            mm = gating.build(models, self.gate(), plan, grams, alpha)
            name = model_name(method, plan.m, lineage)
            cache_path = self.path("merged", f"{name}.static.ckpt")
            checkpoint.write(cache_path, "static-cache", mm.static_cache,
                             {"config": models[0].config.to_dict(), "lineage": "merged", "seed": self.seed,
                              "meta": {"method": method}})
            dump_json(self.path("merged", f"{name}.json"), {
                "kind": "gated", "method": method, "lineage": lineage, "alpha": alpha,
                "strategy": rep.strategy, "plan": plan.to_json(), "members": members,
                "gate": "gate/gate.ckpt", "static_cache": str(cache_path.relative_to(self.root)),
            })
            return name
        if method == "avgmean":
            merged = merge.avg_mean(models, choice)
        elif method == "taskarith":
            merged = merge.task_arithmetic(self.base(), models, lam, choice)
        elif method == "regmean":
            merged = merge.regmean(models, self.load_grams(lineage), alpha, choice)
        else:
            raise VitMergeError(f"unknown merge method {method!r}")
        name = model_name(method, None, lineage)
        checkpoint.save_vit(self.path("merged", f"{name}.ckpt"), merged, lineage="merged", seed=self.seed,
                            meta={"method": method, "members": members, "lambda": lam, "alpha": alpha,
                                  "classifier_choice": c.classifier_choice, "member_lineage": lineage})
        return name

    def load_gated(self, name: str) -> gating.MergedModel:
        spec = load_json(self.path("merged", f"{name}.json"))
        models = [checkpoint.load_vit(self.need(self.root / p))[0] for p in spec["members"]]
        g = checkpoint.load_gate(self.need(self.root / spec["gate"]))[0]
        _, cache = checkpoint.read(self.need(self.root / spec["static_cache"]))
        plan = gating.MergePlan.from_json(spec["plan"])
        groups = plan.gated_groups()
        gated = tuple(n for n in merge.body_names(models[0]) if vit.group_of(n) in groups)
        for a in cache.values():
            a.flags.writeable = False
        return gating.MergedModel(tuple(models), g, plan, cache, tuple(m.classifier() for m in models), gated)

    # ------------------------------------------------------------ evaluation

    def evaluate(self, name: str) -> dict:
        """Per-task accuracy of an individual model (``task<k>``/``scratch<k>``) or a merged one."""
        tests = [self.dataset(s.task_id, "test") for s in self.tasks]
        n = len(self.tasks)
        row = {"name": name, "seed": self.seed, "m": None}
        if name in ("individual", "individual_scratch"):
            lineage = "from-scratch" if name.endswith("scratch") else "pretrained"
            models = self.models(lineage)
            accs = [train.accuracy(mdl, t) for mdl, t in zip(models, tests)]
            row.update(method=name, lineage=lineage,
                       params=sum(mdl.param_count() for mdl in models),
                       flops=vit.flops_estimate(models[0].config))
        elif self.path("merged", f"{name}.json").exists():
            mm = self.load_gated(name)
            spec = load_json(self.path("merged", f"{name}.json"))
            accs, routed = [], []
            for i, t in enumerate(tests):
                tasks, classes = gating.predict(mm, t.images)
                accs.append(float(np.mean((tasks == i) & (classes == t.labels))))
                routed.append(float(np.mean(tasks == i)))
            row.update(method=spec["method"], lineage=spec["lineage"], m=mm.plan.m,
                       params=mm.param_count(), flops=mm.flops(), classifier_selection=routed)
        else:
            merged, header = checkpoint.load_vit(self.need(self.path("merged", f"{name}.ckpt")))
            meta = header["meta"]
            members = [checkpoint.load_vit(self.need(self.root / p))[0] for p in meta["members"]]
            # static methods use the manually selected (task-matching) classifier
            accs = [train.accuracy(merged.with_classifier(*mem.classifier()), t)
                    for mem, t in zip(members, tests)]
            heads = sum(w.size + b.size for w, b in (mem.classifier() for mem in members))
            body = sum(a.size for k, a in merged.items() if not vit.is_classifier(k))
            row.update(method=meta["method"], lineage=meta["member_lineage"], params=int(body + heads),
                       flops=vit.flops_estimate(merged.config))
        row["per_task"] = [float(a) for a in accs]
        row["avg"] = float(np.mean(accs))
        row["chance"] = float(np.mean([1.0 / s.num_classes for s in self.tasks]))
        assert len(accs) == n
        dump_json(self.path("evals", f"{name}.json"), row)
        return row

    def merged_names(self) -> List[str]:
        c = self.config.merge
        names = []
        for method in c.methods:
            if method.startswith("gated-"):
                names += [model_name(method, min(m, self.config.model.depth)) for m in c.m_sweep]
            else:
                names.append(model_name(method))
        names += [model_name("avgmean", lineage="from-scratch"), model_name("regmean", lineage="from-scratch")]
        return list(dict.fromkeys(names))

    def run_all(self) -> List[dict]:
        """Every stage in order, then every evaluation."""
        c = self.config.merge
        self.gen_data()
        self.pretrain()
        self.finetune()
        self.finetune(from_scratch=True)
        self.train_gate()
        self.grams()
        self.grams("from-scratch")
        self.similarity()
        for method in c.methods:
            if method.startswith("gated-"):
                for m in dict.fromkeys(min(v, self.config.model.depth) for v in c.m_sweep):
                    self.merge(method, m)
            else:
                self.merge(method)
        self.merge("avgmean", lineage="from-scratch")
        self.merge("regmean", lineage="from-scratch")
        rows = [self.evaluate("individual"), self.evaluate("individual_scratch")]
        rows += [self.evaluate(n) for n in self.merged_names()]
        return rows


def _joint_accuracy(model: ViTParams, tests: Sequence[Dataset]) -> float:
    correct = total = 0
    offset = 0
    for t in tests:
        correct += int(np.sum(vit.predict(model, t.images) == t.labels + offset))
        total += len(t)
        offset += t.num_classes
    return correct / total


def gate_accuracy(g, datasets: Sequence[Dataset]) -> float:
    """Share of images whose most probable task is their own (1-based ``task_id``)."""
    hits = total = 0
    for ds in datasets:
        p = gating.gate_probs(g, ds.images)
        hits += int(np.sum(np.argmax(p, axis=1) == ds.task_id - 1))
        total += len(ds)
    return hits / total
