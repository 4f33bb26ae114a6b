"""Aggregate per-seed evaluation rows into tables and figures."""

from __future__ import annotations

import datetime as _dt
import json
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from vitmerge import plotting

ROW_KEYS = ("method", "m", "lineage", "per_task", "avg", "params", "flops", "seed")

METHOD_ORDER = ["individual", "avgmean", "taskarith", "regmean", "gated-avgmean", "gated-regmean"]
LABELS = {
    "individual": "Individual",
    "individual_scratch": "Individual",
    "avgmean": "AvgMean",
    "taskarith": "Task Arithmetic",
    "regmean": "RegMean",
    "gated-avgmean": "Ours + AvgMean",
    "gated-regmean": "Ours + RegMean",
}


def _key(row) -> tuple:
    return (row["method"], row["lineage"], row["m"])


def _sort_key(k):
    method, lineage, m = k
    base = method.replace("_scratch", "")
    pos = METHOD_ORDER.index(base) if base in METHOD_ORDER else len(METHOD_ORDER)
    return (lineage != "pretrained", pos, -1 if m is None else m)


def summarize(rows: Sequence[dict]) -> List[dict]:
    """Mean over seeds for every (method, lineage, m)."""
    groups: Dict[tuple, list] = OrderedDict()
    for r in rows:
        groups.setdefault(_key(r), []).append(r)
    out = []
    for k in sorted(groups, key=_sort_key):
        rs = groups[k]
        out.append({
            "method": k[0], "lineage": k[1], "m": k[2],
            "per_task": [float(v) for v in np.mean([r["per_task"] for r in rs], axis=0)],
            "avg": float(np.mean([r["avg"] for r in rs])),
            "avg_std": float(np.std([r["avg"] for r in rs])),
            "params": int(rs[0]["params"]),
            "flops": int(rs[0]["flops"]),
            "seeds": sorted(r["seed"] for r in rs),
        })
    return out


def label(row) -> str:
    name = LABELS.get(row["method"], row["method"])
    if row["lineage"] == "from-scratch":
        name += "(from-scratch)"
    if row["m"] is not None:
        name += f" m={row['m']}"
    return name


def render_table(summary: Sequence[dict], task_names: Sequence[str]) -> str:
    head = ["Method", "Params(M)", "FLOPs(G)", *task_names, "Avg"]
    lines = []
    for r in summary:
        cells = [label(r), f"{r['params'] / 1e6:.4f}", f"{r['flops'] / 1e9:.5f}"]
        cells += [f"{100 * a:.2f}" for a in r["per_task"]]
        cells.append(f"{100 * r['avg']:.2f}")
        lines.append(cells)
    widths = [max(len(str(c)) for c in col) for col in zip(head, *lines)]
    fmt = lambda cells: " | ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(head), sep, *(fmt(c) for c in lines)]) + "\n"


def _gated_curves(summary):
    curves = {}
    for r in summary:
        if r["method"].startswith("gated-") and r["lineage"] == "pretrained":
            curves.setdefault(r["method"], []).append(r)
    return {k: sorted(v, key=lambda r: r["m"]) for k, v in curves.items()}


def plot_accuracy_vs_m(summary, path: Path) -> None:
    fig, ax = plotting.new_figure()
    for method, rs in _gated_curves(summary).items():
        ax.errorbar([r["m"] for r in rs], [100 * r["avg"] for r in rs],
                    yerr=[100 * r["avg_std"] for r in rs], marker="o", capsize=3, label=LABELS[method])
    styles = iter(["--", ":", "-."])
    for r in summary:
        if r["m"] is None and r["lineage"] == "pretrained" and r["method"] in ("individual", "avgmean", "regmean"):
            ax.axhline(100 * r["avg"], ls=next(styles, "--"), color="#666666", lw=1)
            ax.annotate(LABELS[r["method"]], (0, 100 * r["avg"]), fontsize=7, va="bottom")
    ax.set_xlabel("m (gated attention/MLP blocks)")
    ax.set_ylabel("average accuracy (%)")
    ax.legend(loc="lower right")
    plotting.save(fig, path)


def plot_params_vs_m(summary, path: Path) -> None:
    fig, ax = plotting.new_figure()
    for method, rs in _gated_curves(summary).items():
        ax.plot([r["m"] for r in rs], [r["params"] / 1e3 for r in rs], marker="s", label=LABELS[method])
    ax.set_xlabel("m")
    ax.set_ylabel("parameters (K)")
    ax.legend()
    plotting.save(fig, path)


def plot_similarity(report_json: dict, path: Path) -> None:
    blocks = sorted(int(b) for b in report_json["blocks"])
    attn = [report_json["blocks"][str(b)]["attention"] for b in blocks]
    mlp = [report_json["blocks"][str(b)]["mlp"] for b in blocks]
    fig, ax = plotting.new_figure()
    x = np.arange(len(blocks))
    ax.bar(x - 0.2, attn, width=0.4, label="attention")
    ax.bar(x + 0.2, mlp, width=0.4, label="MLP")
    n = report_json["num_models"]
    top = n * (n - 1) / 2
    lo = min(attn + mlp)
    ax.set_ylim(max(-top, lo - 0.1 * (top - lo + 1e-9)), top)
    ax.set_xticks(x, [str(b) for b in blocks])
    ax.set_xlabel("block")
    ax.set_ylabel("summed pairwise cosine similarity")
    ax.set_title(report_json["strategy"], fontsize=9)
    ax.legend()
    plotting.save(fig, path)


def write_report(rows: Sequence[dict], out_dir: Path, task_names: Sequence[str],
                 similarity: Optional[dict] = None, timestamp: Optional[str] = None) -> dict:
    """Write ``report.json``, ``report.txt`` and ``figures/*.png``."""
    out_dir = Path(out_dir)
    (out_dir / "figures").mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (_sort_key(_key(r)), r["seed"]))
    table_rows = [{k: r[k] for k in ROW_KEYS} for r in rows]
    summary = summarize(rows)
    doc = {
        "generated_at": timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "tasks": list(task_names),
        "rows": table_rows,
        "summary": summary,
    }
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(render_table(summary, task_names), encoding="utf-8")
    plot_accuracy_vs_m(summary, out_dir / "figures" / "accuracy_vs_m.png")
    plot_params_vs_m(summary, out_dir / "figures" / "params_vs_m.png")
    if similarity is not None:
        plot_similarity(similarity, out_dir / "figures" / "similarity.png")
    return doc
