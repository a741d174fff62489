"""Across-seed aggregation of per-run analysis outputs into figure-data bundles.

Each run directory holds ``split_info.json``, ``best.ckpt`` and an
``analysis/`` folder written by the analysis subcommands. Missing pieces are
listed under ``gaps`` rather than failing the whole report.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from typing import Sequence

from .circuits import CircuitSpec, overlap_stats, write_edge_list
from .evalkit import bootstrap_ci, format_ci
from .probes import read_probe_csv

ANALYSIS_DIR = "analysis"


def _load_json(path: Path, gaps: list[str]) -> dict | None:
    if not path.exists():
        gaps.append(str(path))
        return None
    return json.loads(path.read_text())


def _ci_row(metric: str, values: list[float]) -> dict:
    mean, lo, hi = bootstrap_ci(values)
    return {"metric": metric, "seeds": len(values), "values": ";".join(f"{v:.4f}" for v in values),
            "mean": round(mean, 6), "ci_lo": round(lo, 6), "ci_hi": round(hi, 6), "formatted": format_ci(mean, lo, hi)}


def _write_rows(rows: list[dict], path: Path) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def build_report(run_dirs: Sequence[str | Path], out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = [Path(r) for r in run_dirs]
    gaps: list[str] = []
    acc_rows: list[dict] = []

    # task accuracy
    per_metric: dict[str, list[float]] = defaultdict(list)
    for r in runs:
        ev = _load_json(r / ANALYSIS_DIR / "eval_test.json", gaps)
        if ev:
            per_metric["test_exact_accuracy"].append(ev["exact_accuracy"])
            per_metric["test_digit1_accuracy"].append(ev["digit1_accuracy"])
            per_metric["test_digit2_accuracy"].append(ev["digit2_accuracy"])

    # ablation sweeps
    curve_rows = []
    for sweep in ("forward", "reverse", "full"):
        points: dict[str, list[float]] = defaultdict(list)
        for r in runs:
            ab = _load_json(r / ANALYSIS_DIR / f"ablate_{sweep}.json", gaps)
            if ab:
                for p in ab["points"]:
                    points[p["layers"]].append(p["exact_accuracy"])
        for layers, vals in points.items():
            curve_rows.append({"sweep": sweep, "layers": layers, **_ci_row(f"ablate_{sweep}", vals)})
    _write_rows(curve_rows, out / "ablation_curves.csv")

    # patching
    patch_rows = []
    for proto, conds in (("layer1", ("D",)), ("fullroute", ("N", "B", "D"))):
        vals: dict[tuple[str, str], list[float]] = defaultdict(list)
        for r in runs:
            pj = _load_json(r / ANALYSIS_DIR / f"patch_{proto}.json", gaps)
            if pj:
                for c in conds:
                    for k in ("source_exact", "donor_exact", "neither"):
                        vals[(c, k)].append(pj["conditions"][c][k])
        for (c, k), v in vals.items():
            patch_rows.append({"protocol": proto, "condition": c, "outcome": k, **_ci_row(f"patch_{proto}", v)})
            per_metric[f"patch_{proto}_{c}_{k}"] = v
    _write_rows(patch_rows, out / "patching.csv")

    # probes
    grid: dict[tuple[str, str, str], dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in runs:
        p = r / ANALYSIS_DIR / "probes.csv"
        if not p.exists():
            gaps.append(str(p))
            continue
        for row in read_probe_csv(p):
            cell = grid[(row["stream"], row["depth"], row["target"])]
            cell["r2"].append(float(row["mean_r2"]))
            if row["init_r2"]:
                cell["init"].append(float(row["init_r2"]))
            if row["gap_closed"] and row["gap_closed"] != "saturated":
                cell["gap"].append(float(row["gap_closed"]))
        raw = _load_json(r / ANALYSIS_DIR / "probe_raw_baseline.json", gaps)
        if raw:
            for k, v in raw.items():
                per_metric[f"raw_scalar_r2_{k}"].append(v)
    probe_rows = []
    for (s, dp, t), cell in grid.items():
        row = {"stream": s, "depth": int(dp), "target": t}
        for key in ("r2", "init", "gap"):
            if cell[key]:
                m, lo, hi = bootstrap_ci(cell[key])
                row.update({f"{key}_mean": round(m, 6), f"{key}_lo": round(lo, 6), f"{key}_hi": round(hi, 6)})
            else:
                row.update({f"{key}_mean": "", f"{key}_lo": "", f"{key}_hi": ""})
        probe_rows.append(row)
    _write_rows(probe_rows, out / "probe_grid.csv")

    # circuits
    specs = []
    for r in runs:
        cp = r / ANALYSIS_DIR / "circuit.json"
        if not cp.exists():
            gaps.append(str(cp))
            continue
        spec = CircuitSpec.load(cp)
        specs.append(spec)
        write_edge_list(spec, out / f"circuit_edges_{r.name}.csv")
        f = spec.fractions()
        per_metric["circuit_relation_fraction"].append(f["relation_fraction"])
        per_metric["circuit_layer_edge_fraction"].append(f["layer_edge_fraction"])
        kept = _load_json(r / ANALYSIS_DIR / "circuit_test.json", gaps)
        if kept:
            per_metric["circuit_kept_only_accuracy"].append(kept["kept_only_exact_accuracy"])
            per_metric["circuit_clean_accuracy"].append(kept["clean_exact_accuracy"])
    overlap = overlap_stats(specs) if len(specs) >= 2 else None
    if overlap:
        (out / "circuit_overlap.json").write_text(json.dumps(overlap, indent=1) + "\n")

    for metric, vals in per_metric.items():
        if vals:
            acc_rows.append(_ci_row(metric, vals))
    _write_rows(acc_rows, out / "summary.csv")
    report = {
        "format": "digitlab.report/1",
        "runs": [str(r) for r in runs],
        "summary": acc_rows,
        "circuit_overlap": overlap,
        "gaps": sorted(set(gaps)),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    return report
