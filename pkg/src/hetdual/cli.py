"""Command-line entry points: ``hetdual <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data_io import (CheckpointError, SyntheticConfig, build_cooccurrence_stats, generate_synthetic_dataset,
                      load_predictions, load_stats, save_predictions, save_scenes, save_stats)
from .evaluation import distribution_ratio_report, evaluate_predictions
from .estimator import TypeAwareSGG
from .experiments import TOGGLES, pairsel_bench, run_ablation
from .graph_construction import STRATEGIES, PairSelectionParams
from .scene_model import ConfigError, DomainError, SchemaError, default_vg_ontology, load_ontology, toy_ontology
from .training import MODES, TrainingDiverged, UsageError
from .validation import check_scenes

log = logging.getLogger("hetdual")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p, scenes=True):
    p.add_argument("--ontology", help="ontology JSON (default: bundled 150-object / 50-relation vocabulary)")
    if scenes:
        p.add_argument("--scenes", required=True, help="scene JSONL file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def _model_flags(p):
    p.add_argument("--mode", choices=MODES, default="predcls")
    p.add_argument("--sb", type=float, default=600.0)
    p.add_argument("--sl", type=float, default=1e-5)
    p.add_argument("--topk", type=int, default=4096)
    p.add_argument("--strategy", choices=STRATEGIES, default="full")
    p.add_argument("--layers-intra", type=int, default=2)
    p.add_argument("--layers-inter", type=int, default=2)


def _train_flags(p):
    p.add_argument("--lr", type=float, default=0.008)
    p.add_argument("--batch", type=int, default=5)
    p.add_argument("--wd", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--stats", help="co-occurrence stats JSON (default: built from the training scenes)")
    p.add_argument("--val-scenes", help="validation scene JSONL")


def build_parser():
    parser = _Parser(prog="hetdual", description="Scene graph generation with type-aware message passing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic rule-governed corpus")
    _common(p, scenes=False)
    p.add_argument("--n-scenes", type=int, default=200)
    p.add_argument("--exponent", type=float, default=2.0)
    p.add_argument("--toy", action="store_true", help="use (and write) the small generated ontology")

    p = sub.add_parser("prepare-stats", help="class-pair co-occurrence statistics")
    _common(p)

    p = sub.add_parser("train", help="train and write a checkpoint")
    _common(p)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("infer", help="ranked triplets per scene")
    _common(p)
    _model_flags(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", help="metric report for a prediction file")
    _common(p)
    p.add_argument("--predictions", required=True)

    p = sub.add_parser("ablate", help="eight-row module ablation table")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--test-scenes", required=True)

    p = sub.add_parser("pairsel-bench", help="pair recall and edge counts per selection strategy")
    _common(p)
    _model_flags(p)
    p.add_argument("--stats")

    p = sub.add_parser("distrib-report", help="relation ratios globally and within each type")
    _common(p)
    return parser


# -- helpers ------------------------------------------------------------------------------

def _ontology(args):
    return load_ontology(args.ontology) if args.ontology else default_vg_ontology()


def _outdir(args, *names):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    existing = [n for n in names if (out / n).exists()]
    if existing and not args.force:
        raise UsageError(f"{out / existing[0]} exists; pass --force to overwrite")
    return out


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8")


def _snapshot(out, args):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "force"}
    _write(out / "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _csv(rows, header_comments=()):
    buf = io.StringIO()
    for c in header_comments:
        buf.write(f"# {c}\n")
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _aligned(rows):
    cols = list(rows[0])
    width = {c: max(len(str(c)), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(str(c).rjust(width[c]) for c in cols)]
    lines += ["  ".join(str(r[c]).rjust(width[c]) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def _estimator_kwargs(args):
    kw = dict(mode=args.mode, s_b=args.sb, s_l=args.sl, top_k=args.topk, pair_strategy=args.strategy,
              layers_intra=args.layers_intra, layers_inter=args.layers_inter, random_state=args.seed)
    if hasattr(args, "lr"):
        kw.update(learning_rate=args.lr, batch_size=args.batch, weight_decay=args.wd, epochs=args.epochs)
    return kw


# -- subcommands ------------------------------------------------------------------------------

def cmd_synth(args):
    out = _outdir(args, "scenes.jsonl")
    onto = toy_ontology() if args.toy else _ontology(args)
    if args.toy:
        _write(out / "ontology.json", json.dumps(onto.to_dict(), indent=2) + "\n")
    cfg = SyntheticConfig(n_scenes=args.n_scenes, longtail_exponent=args.exponent, seed=args.seed)
    save_scenes(generate_synthetic_dataset(cfg, onto), out / "scenes.jsonl")
    _snapshot(out, args)


def cmd_prepare_stats(args):
    out = _outdir(args, "stats.json")
    onto = _ontology(args)
    scenes = check_scenes(args.scenes, onto)
    bare = [s for s in scenes if s.gt_triplets is None]
    if bare:
        log.warning("%d scene(s) carry no ground truth and add no counts", len(bare))
        scenes = [replace(s, gt_triplets=()) if s.gt_triplets is None else s for s in scenes]
    stats = build_cooccurrence_stats(scenes, onto)
    save_stats(stats, out / "stats.json")
    rows = stats.pair_prob.sum(axis=1)
    log.info("pair_prob row sums: min %.6f max %.6f", rows.min(), rows.max())
    _snapshot(out, args)


def cmd_train(args):
    out = _outdir(args, "model.ckpt", "metrics.jsonl")
    onto = _ontology(args)
    scenes = check_scenes(args.scenes, onto, require_gt=True)
    val = check_scenes(args.val_scenes, onto, require_gt=True) if args.val_scenes else None
    stats = load_stats(args.stats) if args.stats else None
    est = TypeAwareSGG(ontology=onto, **_estimator_kwargs(args))
    try:
        est.fit(scenes, val_scenes=val, stats=stats)
    finally:
        if hasattr(est, "history_"):
            _write(out / "metrics.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in est.history_))
    est.save(out / "model.ckpt")
    _snapshot(out, args)


def cmd_infer(args):
    out = _outdir(args, "predictions.jsonl")
    onto = _ontology(args)
    scenes = check_scenes(args.scenes, onto, mode=args.mode)
    est = TypeAwareSGG.load(args.checkpoint, onto)
    est.set_params(**{k: v for k, v in _estimator_kwargs(args).items() if k != "random_state"})
    preds = est.predict_ranked(scenes)
    save_predictions(((s.scene_id, preds[s.scene_id]) for s in scenes), out / "predictions.jsonl")
    _snapshot(out, args)


def cmd_eval(args):
    out = _outdir(args, "metrics.json", "metrics.csv")
    onto = _ontology(args)
    scenes = check_scenes(args.scenes, onto, require_gt=True)
    report = evaluate_predictions(load_predictions(args.predictions), scenes, onto)
    _write(out / "metrics.json", report.to_json())
    _write(out / "metrics.csv", report.to_csv())
    _snapshot(out, args)
    print(f"R@50 {100 * report.r_at[50]:.2f}  mR@50 {100 * report.mr_at[50]:.2f}")


def cmd_ablate(args):
    out = _outdir(args, "ablation.csv")
    onto = _ontology(args)
    train = check_scenes(args.scenes, onto, require_gt=True)
    test = check_scenes(args.test_scenes, onto, require_gt=True)
    stats = load_stats(args.stats) if args.stats else None
    base = _estimator_kwargs(args)
    rows = run_ablation(train, test, onto, base, stats)
    notes = [f"{k}: {v}" for k, v in TOGGLES.items()] + [f"seed {args.seed}"]
    _write(out / "ablation.csv", _csv(rows, notes))
    _write(out / "ablation.txt", _aligned(rows))
    _snapshot(out, args)


def cmd_pairsel_bench(args):
    out = _outdir(args, "pairsel.csv")
    onto = _ontology(args)
    scenes = check_scenes(args.scenes, onto, require_gt=True)
    stats = load_stats(args.stats) if args.stats else build_cooccurrence_stats(scenes, onto)
    params = PairSelectionParams(args.sb, args.sl, args.topk)
    rows = pairsel_bench(scenes, onto, stats, params, mode=args.mode)
    _write(out / "pairsel.csv", _csv(rows))
    _write(out / "pairsel.txt", _aligned(rows))
    _snapshot(out, args)


def cmd_distrib_report(args):
    out = _outdir(args, "distribution.csv")
    onto = _ontology(args)
    scenes = check_scenes(args.scenes, onto, require_gt=True)
    rows = [{"relation": r["relation"], "type": r["type"], "global_ratio": f"{r['global_ratio']:.6f}",
             "within_type_ratio": f"{r['within_type_ratio']:.6f}"}
            for r in distribution_ratio_report(scenes, onto)]
    _write(out / "distribution.csv", _csv(rows))
    _write(out / "distribution.txt", _aligned(rows))
    _snapshot(out, args)


COMMANDS = {
    "synth": cmd_synth,
    "prepare-stats": cmd_prepare_stats,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "pairsel-bench": cmd_pairsel_bench,
    "distrib-report": cmd_distrib_report,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"hetdual: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"hetdual: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, DomainError, CheckpointError, TrainingDiverged, OSError, ValueError) as e:
        print(f"hetdual: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
