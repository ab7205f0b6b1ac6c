"""``sidehead`` command line: synth, train, eval, explain, report."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (
    DatasetManifest,
    ManifestError,
    PlantedSpec,
    TensorFormatError,
    generate_planted,
    load_dataset,
)
from .heads import HeadShapeError
from .metrics import emit_report, evaluate, explain, histogram_csv, weight_histogram
from .pipeline import (
    STAGES,
    CheckpointError,
    NonFiniteLossError,
    PipelineConfig,
    TrainTrace,
    init_head,
    load_checkpoint,
    prune_params,
    run_full_pipeline,
    run_stage,
    save_checkpoint,
    snapshot,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad flags or incompatible inputs; exits with status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_split(data_dir, split):
    path = Path(data_dir) / f"{split}.json"
    if not path.exists():
        raise UsageError(f"{data_dir}: no {split}.json manifest")
    manifest = DatasetManifest.load(path)
    manifest.validate()
    return load_dataset(manifest)


def _check_dims(params, data):
    if data.features.shape[1] != params.d:
        raise UsageError(f"checkpoint expects d={params.d}, data has {data.features.shape[1]} channels")
    if data.num_classes != params.n_classes:
        raise UsageError(f"checkpoint has {params.n_classes} classes, data has {data.num_classes}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    doc = json.loads(Path(args.spec).read_text()) if args.spec else {}
    try:
        spec = PlantedSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid spec: {exc}") from exc
    generate_planted(spec, args.n_train, args.n_test, args.seed, out_dir=args.out)


def cmd_train(args):
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    train = _load_split(args.data, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = load_checkpoint(args.resume) if args.resume else None
    if params is not None:
        _check_dims(params, train)

    if args.stage == "all":
        test = _load_split(args.data, "test") if (Path(args.data) / "test.json").exists() else None
        run_full_pipeline(train, cfg, test, params=params, out_dir=out)
        return

    if params is None:
        if args.stage != "pretrain":
            raise UsageError(f"--stage {args.stage} needs --resume")
        params = init_head(cfg, train.features.shape[1], train.num_classes)
    t = cfg.calibrate.ocla.threshold
    if args.stage == "prune":
        params = prune_params(params, cfg.prune)
        rec, act = snapshot(params, train, "prune", 0, None, t)
        trace = TrainTrace([rec], [act])
        epochs = 0
    else:
        stage_cfg = cfg.stage(args.stage)
        params, trace = run_stage(params, train, stage_cfg)
        epochs = stage_cfg.epochs
    save_checkpoint(params, out / f"{args.stage}.ckpt", args.stage, epochs)
    trace.save(out / "trace.csv")


def cmd_eval(args):
    params = load_checkpoint(args.ckpt)
    data = _load_split(args.data, args.split)
    _check_dims(params, data)
    if not 0 < args.threshold < 1:
        raise UsageError("--threshold must lie in (0, 1)")
    emit_report(evaluate(params, data, args.threshold, bins=args.bins), args.out)


def cmd_explain(args):
    params = load_checkpoint(args.ckpt)
    data = _load_split(args.data, args.split)
    _check_dims(params, data)
    if not 0 <= args.sample < len(data):
        raise UsageError(f"--sample {args.sample} out of range [0, {len(data)})")
    ex = explain(data.features[args.sample], params, args.threshold, sample_id=args.sample)
    doc = ex.to_dict()
    doc["label"] = int(data.labels[args.sample])
    Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")


def cmd_report(args):
    """Plot data: weight histogram of a checkpoint and active weights per epoch."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ckpt:
        params = load_checkpoint(args.ckpt)
        edges, counts = weight_histogram(params.sheet, args.bins, params.head_type)
        (out / "weight_histogram.csv").write_text(histogram_csv(edges, counts))
    if args.trace:
        with open(args.trace, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and "active_weights" not in rows[0]:
            raise UsageError(f"{args.trace}: not a training trace")
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["step", "stage", "epoch", "active_weights"])
        for i, r in enumerate(rows):
            wr.writerow([i, r["stage"], r["epoch"], r["active_weights"]])
        (out / "active_weights.csv").write_text(buf.getvalue())
    if not (args.ckpt or args.trace):
        raise UsageError("report needs --ckpt and/or --trace")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sidehead", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a planted-concept dataset")
    p.add_argument("--spec", help="PlantedSpec JSON (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one stage or the whole pipeline")
    p.add_argument("--config", help="pipeline config JSON (defaults when omitted)")
    p.add_argument("--data", required=True, help="directory holding train.json/test.json")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=[STAGES[0], "prune", *STAGES[1:], "all"], default="all")
    p.add_argument("--resume", help="checkpoint to start from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="explain one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="write plot data (histogram, active weights over epochs)")
    p.add_argument("--ckpt")
    p.add_argument("--trace", help="trace.csv written by train")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ManifestError, CheckpointError, HeadShapeError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"sidehead {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"sidehead {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TensorFormatError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"sidehead {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
