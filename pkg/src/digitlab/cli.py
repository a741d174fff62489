"""Command-line entry point: ``digitlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import manifest
from .model import ModelConfig
from .rng import ANALYSIS_SEED
from .taskgen import SplitInfo, make_split, split_examples, write_dataset

log = logging.getLogger("digitlab")


class MissingArtifact(Exception):
    pass


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path}")
    return path


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    info = make_split(args.seed)
    info.save(out / "split_info.json")
    parts = split_examples(info)
    outputs = [out / "split_info.json"]
    for name, exs in parts.items():
        write_dataset(exs, out / f"{name}.txt")
        outputs.append(out / f"{name}.txt")
    manifest.write_manifest(out, "gen-data", {"seed": args.seed}, seeds={"split": args.seed}, outputs=outputs)
    print(" ".join(f"{k}={len(v)}" for k, v in parts.items()))
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = ModelConfig(n_layers=args.layers)
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, micro_batch=args.micro_batch,
                     target_val_accuracy=args.target_val)
    state = train(args.seed, tc, model_cfg, out, resume=not args.no_resume)
    manifest.write_manifest(
        out, "train", {"model": model_cfg.to_json(), "train": asdict(tc)},
        seeds={"train": args.seed},
        outputs=[out / "best.ckpt", out / "init.ckpt", out / "split_info.json", out / "metrics.csv"],
    )
    print(f"best epoch {state.meta.get('best_epoch')} val exact {state.meta.get('best_val_exact_accuracy'):.2f}%")
    return 0


def _load_ckpt(args):
    """Resolve ``--ckpt`` (file or run dir) to (state, split parts, run dir, out dir)."""
    from .checkpoint import load_state

    ck = Path(args.ckpt)
    if ck.is_dir():
        ck = ck / "best.ckpt"
    run = ck.parent
    state = load_state(_need(ck))
    info = SplitInfo.load(_need(run / "split_info.json"))
    out = Path(args.out) if getattr(args, "out", None) else run / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    return state, split_examples(info), ck, out


def _inputs(ck: Path) -> dict:
    return {"ckpt": ck, "split_info": ck.parent / "split_info.json"}


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_eval(args) -> int:
    from .evalkit import evaluate

    state, parts, ck, out = _load_ckpt(args)
    split = {"val": "validation", "test": "test"}[args.split]
    res = evaluate(state, parts[split])
    res.write_csv(out / f"eval_{args.split}.csv")
    summary = res.summary()
    summary.update({"split": split, "checkpoint": str(ck)})
    _dump(summary, out / f"eval_{args.split}.json")
    manifest.write_manifest(out, "eval", {"split": split}, inputs=_inputs(ck),
                            outputs=[out / f"eval_{args.split}.csv", out / f"eval_{args.split}.json"],
                            name=f"manifest_eval_{args.split}.json")
    print(f"{split}: exact {summary['exact_accuracy']:.2f}% digit1 {summary['digit1_accuracy']:.2f}% "
          f"digit2 {summary['digit2_accuracy']:.2f}% (n={summary['n']})")
    return 0


def cmd_probe(args) -> int:
    from .probes import collect_activations, probe_all, raw_scalar_baseline, write_probe_csv
    from .trainer import rebuild_at_init

    state, parts, ck, out = _load_ckpt(args)
    pooled = parts["validation"] + parts["test"]
    table = collect_activations(state, pooled)
    init_table = None
    if args.init_baseline:
        init_table = collect_activations(rebuild_at_init(state.init_seed, state.config), pooled)
    rows = probe_all(table, init_table)
    write_probe_csv(rows, out / "probes.csv")
    raw = raw_scalar_baseline(pooled)
    _dump(raw, out / "probe_raw_baseline.json")
    manifest.write_manifest(out, "probe", {"init_baseline": args.init_baseline, "folds": 5},
                            inputs=_inputs(ck), seeds={"fold": ANALYSIS_SEED, "init": state.init_seed},
                            outputs=[out / "probes.csv", out / "probe_raw_baseline.json"], name="manifest_probe.json")
    print(f"{len(rows)} probe cells over {len(pooled)} pooled examples; raw-scalar R2 " +
          " ".join(f"{k}={v:.3f}" for k, v in raw.items()))
    return 0


def cmd_ablate(args) -> int:
    from .interventions import sweep

    state, parts, ck, out = _load_ckpt(args)
    points = sweep(state, args.sweep, parts["test"])
    rows = [{"layers": "-".join(map(str, ls)) or "none", "exact_accuracy": acc} for ls, acc in points]
    with open(out / f"ablate_{args.sweep}.csv", "w") as fh:
        fh.write("layers,exact_accuracy\n")
        for r in rows:
            fh.write(f"{r['layers']},{r['exact_accuracy']:.4f}\n")
    _dump({"sweep": args.sweep, "n": len(parts["test"]), "points": rows}, out / f"ablate_{args.sweep}.json")
    manifest.write_manifest(out, "ablate", {"sweep": args.sweep}, inputs=_inputs(ck),
                            outputs=[out / f"ablate_{args.sweep}.csv"], name=f"manifest_ablate_{args.sweep}.json")
    for r in rows:
        print(f"{r['layers']:>12s}  {r['exact_accuracy']:.2f}%")
    return 0


def cmd_patch(args) -> int:
    from .evalkit import evaluate
    from .interventions import (build_pairs_fullroute, build_pairs_layer1, outcome_rates, run_patch,
                                write_pairs_csv)

    state, parts, ck, out = _load_ckpt(args)
    test = parts["test"]
    clean = evaluate(state, test)
    correct = {ex.key: bool(m) for ex, m in zip(clean.examples, clean.exact_match)}
    if args.protocol == "layer1":
        conds = {"D": build_pairs_layer1(test)}
    else:
        conds = build_pairs_fullroute(test, correct, state.config.n_layers)
    pairs = [p for c in conds.values() for p in c]
    outcomes = run_patch(state, pairs)
    write_pairs_csv(pairs, outcomes, out / f"patch_{args.protocol}.csv", correct)
    summary, i = {}, 0
    for c, ps in conds.items():
        summary[c] = outcome_rates(outcomes[i:i + len(ps)])
        i += len(ps)
    _dump({"protocol": args.protocol, "conditions": summary}, out / f"patch_{args.protocol}.json")
    manifest.write_manifest(out, "patch", {"protocol": args.protocol}, inputs=_inputs(ck),
                            seeds={"donor": ANALYSIS_SEED}, outputs=[out / f"patch_{args.protocol}.csv"],
                            name=f"manifest_patch_{args.protocol}.json")
    for c, r in summary.items():
        print(f"{c}: n={r['n']} source-exact {r['source_exact']:.2f}% donor-exact {r['donor_exact']:.2f}%")
    return 0


def cmd_circuit(args) -> int:
    from .circuits import (PrefixScorer, greedy_search, kept_only_eval, sweep_overlap,
                           threshold_sweep, write_edge_list, write_sweep_csv)
    from .evalkit import exact_accuracy

    state, parts, ck, out = _load_ckpt(args)
    scorer = PrefixScorer(state, parts["validation"])
    spec = greedy_search(scorer, (args.first_drop, args.later_frac), seed=state.init_seed)
    spec.save(out / "circuit.json")
    write_edge_list(spec, out / "circuit_edges.csv")
    # the circuit is frozen before the test split is touched
    kept = kept_only_eval(state, spec, parts["test"])
    clean = exact_accuracy(state, parts["test"])
    _dump({"kept_only_exact_accuracy": kept, "clean_exact_accuracy": clean, **spec.fractions()},
          out / "circuit_test.json")
    outputs = [out / "circuit.json", out / "circuit_edges.csv", out / "circuit_test.json"]
    if args.sweep:
        ref = frozenset(spec.relations)
        if args.shared:
            ref = frozenset((r["source"], r["destination"]) for r in json.loads(Path(args.shared).read_text())["shared"])
        specs = threshold_sweep(scorer, seed=state.init_seed)
        ov = sweep_overlap(specs, ref)
        write_sweep_csv(ov, out / "circuit_sweep.csv")
        _dump({k: v for k, v in ov.items() if k != "rows"}, out / "circuit_sweep.json")
        outputs.append(out / "circuit_sweep.csv")
    manifest.write_manifest(out, "circuit", {"first_drop": args.first_drop, "later_frac": args.later_frac,
                                             "sweep": args.sweep}, inputs=_inputs(ck), outputs=outputs,
                            name="manifest_circuit.json")
    f = spec.fractions()
    print(f"retained {f['retained_relations']}/{f['candidate_relations']} relations "
          f"({f['relation_fraction']:.2f}%), layer-edges {f['layer_edge_fraction']:.2f}%; "
          f"kept-only {kept:.2f}% vs clean {clean:.2f}%")
    return 0


def cmd_report(args) -> int:
    from .report import build_report

    for r in args.runs:
        _need(Path(r))
    rep = build_report(args.runs, args.out)
    manifest.write_manifest(args.out, "report", {"runs": args.runs}, outputs=[Path(args.out) / "report.json"],
                            name="manifest_report.json")
    for row in rep["summary"]:
        print(f"{row['metric']:40s} {row['formatted']}")
    if rep["gaps"]:
        print(f"{len(rep['gaps'])} missing inputs (see report.json gaps)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="digitlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write split_info and per-split datasets")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one seed")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--layers", type=int, choices=(10, 5), default=10)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=2048)
    t.add_argument("--micro-batch", type=int, default=512)
    t.add_argument("--target-val", type=float, default=None,
                   help="stop after the first epoch whose validation exact accuracy reaches this percent")
    t.add_argument("--no-resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy-decode a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="linear probes on pooled held-out activations")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--init-baseline", action="store_true")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_probe)

    a = sub.add_parser("ablate", help="D_ones -> output attention ablation sweeps")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--sweep", choices=("forward", "reverse", "full"), required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    pa = sub.add_parser("patch", help="D_ones key/value route patching")
    pa.add_argument("--ckpt", required=True)
    pa.add_argument("--protocol", choices=("layer1", "fullroute"), required=True)
    pa.add_argument("--out")
    pa.set_defaults(func=cmd_patch)

    c = sub.add_parser("circuit", help="greedy sparse circuit search")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--first-drop", type=float, default=0.02)
    c.add_argument("--later-frac", type=float, default=0.20)
    c.add_argument("--sweep", action="store_true", help="also run the 3x3 threshold sweep")
    c.add_argument("--shared", help="circuit_overlap.json whose shared set the sweep compares against")
    c.add_argument("--out")
    c.set_defaults(func=cmd_circuit)

    r = sub.add_parser("report", help="aggregate analysed runs into figure-data bundles")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", default=str(manifest.default_out_root() / "report"))
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing artifact: {exc.filename or exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
