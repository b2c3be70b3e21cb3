"""wegmil command line.

Exit codes: 0 success, 1 gradcheck failure, 2 validation/config/parse
error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from wegmil import pipeline
from wegmil.config import RunConfig
from wegmil.datamodel import dumps_json
from wegmil.errors import IoError, WegmilError
from wegmil.experts import GRAPH, IMAGE
from wegmil.fusion import NAIVE, WEG
from wegmil.gradcheck import gradcheck
from wegmil.synth import SyntheticSpec, gen_synth

log = logging.getLogger("wegmil")

EXIT_OK, EXIT_GRADCHECK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, seed=args.seed, radius=getattr(args, "radius", None))


def _common(p: argparse.ArgumentParser, manifest: bool = True, out: bool = True):
    p.add_argument("--config", type=Path, help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--radius", type=float, help="cell-graph radius in pixels (default 60)")
    if manifest:
        p.add_argument("--manifest", type=Path, required=True)
    if out:
        p.add_argument("--out", type=Path, required=True, help="run directory")


def cmd_gen_synth(args) -> int:
    raw = json.loads(args.config.read_text()) if args.config else {}
    flags = {
        "seed": args.seed, "bags_per_class": args.bags_per_class, "M": args.instances,
        "rho": args.rho, "image_strength": args.image_strength,
        "graph_strength": args.graph_strength, "modality_split": args.modality_split,
    }
    raw.update({k: v for k, v in flags.items() if v is not None})
    path = gen_synth(SyntheticSpec.from_dict(raw), args.out)
    print(path)
    return EXIT_OK


def cmd_build_graphs(args) -> int:
    path = pipeline.build_graphs_phase(args.manifest, _config(args), args.out)
    print(path)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    ds, splits, config = pipeline.prepare_run(args.manifest, _config(args), args.out)
    _, rows = pipeline.pretrain_phase(ds, splits, args.modality, config, args.out)
    last = [r for r in rows if r.epoch == rows[-1].epoch] if rows else []
    for r in last:
        print(f"{args.modality} {r.split}: loss={r.loss:.4f} accuracy={r.accuracy:.3f}")
    return EXIT_OK


def cmd_train_gate(args) -> int:
    ds, splits, config = pipeline.prepare_run(args.manifest, _config(args), args.out)
    pipeline.train_gate_phase(ds, splits, args.variant, config, args.out)
    print(pipeline.RunDir(args.out).root / "gates" / f"{args.variant}.ckpt")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds, splits, config = pipeline.prepare_run(args.manifest, _config(args), args.out)
    summary = pipeline.eval_phase(ds, splits, config, args.out)
    for model, per_split in summary["metrics"].items():
        m = per_split["test"]
        print(f"{model:<6} test accuracy={m['accuracy']:.3f} macro_recall={m['macro_recall']:.3f}")
    print(json.dumps(summary["gate_stats"], sort_keys=True))
    return EXIT_OK


def cmd_explain(args) -> int:
    ds, splits, config = pipeline.prepare_run(args.manifest, _config(args), args.out)
    reports = pipeline.explain_phase(ds, [args.bag], config, args.out, q=args.topq, figures=1)
    r = reports[0]
    print(f"{r.bag_id}: predicted={ds.manifest.class_names[r.predicted_class]} "
          f"top regions={r.top_regions[r.predicted_class]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck(_config(args))
    for line in report.lines():
        print(line)
    print(f"{'PASS' if report.passed else 'FAIL'} overall in {report.seconds:.1f}s")
    if args.out:
        pipeline.RunDir(args.out).write("gradcheck.json", dumps_json(report.to_json()))
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_run(args) -> int:
    config = _config(args)
    if args.no_naive:
        config.train_naive = False
    summary = pipeline.run_pipeline(config, args.manifest, args.out)
    for model, per_split in summary["metrics"].items():
        print(f"{model:<6} test accuracy={per_split['test']['accuracy']:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wegmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a planted-signal synthetic corpus")
    p.add_argument("--config", type=Path, help="JSON synthetic spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--bags-per-class", type=int)
    p.add_argument("--instances", type=int, help="patches per bag (M)")
    p.add_argument("--rho", type=float, help="fraction of signal patches")
    p.add_argument("--image-strength", type=float)
    p.add_argument("--graph-strength", type=float)
    p.add_argument("--modality-split", choices=("both", "graph_only", "image_only"))
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("build-graphs", help="radius cell graphs for every bag")
    _common(p)
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("pretrain", help="train one modality expert")
    _common(p)
    p.add_argument("--modality", choices=(GRAPH, IMAGE), required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-gate", help="train a gate over frozen experts")
    _common(p)
    p.add_argument("--variant", choices=(NAIVE, WEG), default=WEG)
    p.set_defaults(func=cmd_train_gate)

    p = sub.add_parser("eval", help="metrics for experts and gates on every split")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="class-wise importance report for one bag")
    _common(p)
    p.add_argument("--bag", required=True)
    p.add_argument("--topq", type=int)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    _common(p, manifest=False, out=False)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("run", help="the whole pipeline")
    _common(p)
    p.add_argument("--no-naive", action="store_true", help="skip the naive-gate comparison")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (IoError, OSError) as exc:
        print(f"wegmil: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except WegmilError as exc:
        print(f"wegmil: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
