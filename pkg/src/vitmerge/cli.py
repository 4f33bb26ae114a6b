"""Command-line entry point: ``vitmerge <command> --config PATH [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from vitmerge import VitMergeError, report
from vitmerge.config import METHOD_CHOICES, ExperimentConfig, load_config, parse_config
from vitmerge.gate import STRATEGIES
from vitmerge.pipeline import Run, load_json, model_name

log = logging.getLogger("vitmerge")

COMMANDS = ("gen-data", "pretrain", "finetune", "train-gate", "grams", "similarity",
            "merge", "eval", "report", "run")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="experiment config (YAML/JSON)")
    common.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="run only this seed instead of the config's seed list")
    common.add_argument("--m", type=_int_list, help="comma-separated m values, e.g. 0,1,2,4")
    common.add_argument("--method", choices=METHOD_CHOICES)
    common.add_argument("--lambda", dest="lam", type=float, help="task arithmetic scaling")
    common.add_argument("--alpha", type=float, help="RegMean off-diagonal gram scale (default 0.9)")
    common.add_argument("--gate-frac", type=float, help="share of each test split for gate/gram data (default 0.15)")
    common.add_argument("--strategy", choices=sorted(STRATEGIES))
    common.add_argument("--from-scratch", action="store_true",
                        help="finetune/grams/merge the independently initialised lineage")
    common.add_argument("--model", help="eval: artifact name, e.g. individual, regmean, gated-regmean_m2")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vitmerge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common])
    return parser


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    merge_update, gate_update = {}, {}
    if args.m is not None:
        merge_update["m_sweep"] = args.m
    if args.lam is not None:
        merge_update["lam"] = args.lam
    if args.alpha is not None:
        merge_update["alpha"] = args.alpha
    if args.strategy is not None:
        merge_update["strategy"] = args.strategy
    if args.gate_frac is not None:
        gate_update["frac"] = args.gate_frac
    raw = cfg.dump()
    raw["merge"].update({("lambda" if k == "lam" else k): v for k, v in merge_update.items()})
    raw["gate"].update(gate_update)
    if args.out is not None:
        raw["out_dir"] = str(args.out)
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    return parse_config(raw)


def _merge(run: Run, args) -> List[str]:
    lineage = "from-scratch" if args.from_scratch else "pretrained"
    methods = [args.method] if args.method else list(run.config.merge.methods)
    names = []
    for method in methods:
        if method.startswith("gated-"):
            for m in dict.fromkeys(run.config.merge.m_sweep):
                names.append(run.merge(method, m, lineage))
        else:
            names.append(run.merge(method, lineage=lineage))
    return names


def _eval_names(run: Run, args) -> List[str]:
    if args.model:
        return [args.model]
    if args.method:
        if args.method.startswith("gated-"):
            depth = run.config.model.depth
            return [model_name(args.method, min(m, depth)) for m in run.config.merge.m_sweep]
        return [model_name(args.method, lineage="from-scratch" if args.from_scratch else "pretrained")]
    return ["individual", "individual_scratch"] + run.merged_names()


def write_report(cfg: ExperimentConfig, out: Path, timestamp: Optional[str] = None) -> dict:
    rows = []
    similarity = None
    for seed in cfg.seeds:
        run = Run(cfg, seed, out)
        evals = sorted(run.path("evals").glob("*.json")) if run.path("evals").exists() else []
        if not evals:
            raise VitMergeError(f"no evaluations under {run.path('evals')}; run `vitmerge eval` first")
        rows += [load_json(p) for p in evals]
        sim_path = run.path("similarity", f"{cfg.merge.strategy}.json")
        if similarity is None and sim_path.exists():
            similarity = load_json(sim_path)
    names = [f"{t.family}" for t in cfg.tasks]
    doc = report.write_report(rows, out / "report", names, similarity, timestamp)
    print((out / "report" / "report.txt").read_text(), end="")
    return doc


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        out = Path(cfg.out_dir)
        if args.command == "report":
            write_report(cfg, out)
            return 0
        for seed in cfg.seeds:
            run = Run(cfg, seed, out)
            cmd = args.command
            if cmd == "gen-data":
                run.gen_data()
            elif cmd == "pretrain":
                run.pretrain()
            elif cmd == "finetune":
                run.finetune(from_scratch=args.from_scratch)
            elif cmd == "train-gate":
                run.train_gate()
            elif cmd == "grams":
                run.grams("from-scratch" if args.from_scratch else "pretrained")
            elif cmd == "similarity":
                run.similarity(args.strategy)
            elif cmd == "merge":
                for name in _merge(run, args):
                    log.info("seed %d: wrote merged/%s", seed, name)
            elif cmd == "eval":
                for name in _eval_names(run, args):
                    row = run.evaluate(name)
                    print(f"seed {seed} {name}: " + " ".join(f"{100 * a:.2f}" for a in row["per_task"])
                          + f" | avg {100 * row['avg']:.2f}")
            elif cmd == "run":
                run.run_all()
            log.info("seed %d: %s done", seed, cmd)
        if args.command == "run":
            write_report(cfg, out)
    except VitMergeError as exc:
        print(f"vitmerge: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
