"""Command-line entry point: prep, synth, resplit, train, eval, solve."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .dataio import (
    SplitSpec,
    SynthConfig,
    load_records,
    make_record,
    resplit_by_template,
    synth_generate,
    template_counts,
    validate_record,
    write_records,
)
from .exprtree import leaf_names, render_tree, to_infix

log = logging.getLogger("bottomup_mwp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DECODE = 0, 1, 2, 3


class DataError(Exception):
    """Input files missing, unreadable or empty after validation."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _records_file(path: Path) -> Path:
    """A records file, or ``records.jsonl`` inside a directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "records.jsonl"
    if not path.exists():
        raise DataError(f"{path} does not exist")
    return path


def _load(path, fmt="native", pool=None):
    kwargs = {} if pool is None else {"constant_pool": pool}
    records = load_records(_records_file(path), fmt, **kwargs)
    if not records:
        raise DataError(f"no usable records in {path}")
    return records


def cmd_prep(args) -> int:
    issues: list = []
    src = Path(args.input)
    if not src.exists():
        raise DataError(f"{src} does not exist")
    records = load_records(src, args.format, issues=issues)
    for rec in records:
        validate_record(rec)
    if not records:
        raise DataError(f"no usable records in {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "records.jsonl", records)
    (out / "issues.txt").write_text("".join(f"{where}\t{why}\n" for where, why in issues))
    print(f"{len(records)} records written to {out / 'records.jsonl'}; {len(issues)} skipped")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    cfg = SynthConfig.from_dict(raw)
    records = synth_generate(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_records(out, records)
    print(f"{len(records)} synthetic records written to {out} ({len(template_counts(records))} templates)")
    return EXIT_OK


def cmd_resplit(args) -> int:
    records = _load(args.input)
    train, test = resplit_by_template(records, SplitSpec(args.templates, args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "train.jsonl", train)
    write_records(out / "test.jsonl", test)
    print(f"train {len(train)} records / {len(template_counts(train))} templates, "
          f"test {len(test)} records / {len(template_counts(test))} templates")
    return EXIT_OK


def cmd_train(args) -> int:
    from .engine import train

    try:
        run = RunConfig.load(args.config)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    run.output_dir = str(args.out)
    train_records = _load(run.train_path, run.data_format, run.constant_pool)
    val_records = _load(run.val_path, run.data_format, run.constant_pool) if run.val_path else None
    best = train(train_records, run, val_records)
    print(f"checkpoint: {best}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalharness import evaluate_model, write_report

    model = _load_model(args.checkpoint)
    records = _load(args.data, args.format, model.constant_pool)
    report = evaluate_model(model, records, args.tolerance, args.workers)
    written = write_report(report, args.report)
    print(report.table())
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_solve(args) -> int:
    from .engine import infer

    model = _load_model(args.checkpoint)
    constants = list(model.constant_pool) if args.constants is None else args.constants
    record = make_record("cli", args.text, None, None, constants)
    result = infer(record, model)
    if result.failed:
        print("decode failed: no combination could be generated", file=sys.stderr)
        return EXIT_DECODE
    names = leaf_names(len(record.numbers), record.leaf_arity)
    print("equation: x=" + to_infix(result.tree, names))
    print(render_tree(result.tree, names))
    if result.answer is None:
        print("answer: undefined (evaluation failed)")
        return EXIT_DECODE
    print(f"answer: {result.answer:g}")
    return EXIT_OK


def _load_model(path):
    from .engine import Model

    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    return Model.load(path)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bottomup-mwp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", help="ingest and validate a problem file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["native", "svamp"], default="native")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("synth", help="generate synthetic problems")
    p.add_argument("--config", required=True, help="JSON generator settings")
    p.add_argument("--out", required=True, help="output records file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("resplit", help="split by equation template")
    p.add_argument("--input", required=True, help="records file or prep directory")
    p.add_argument("--templates", type=int, required=True, help="number of training templates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_resplit)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=["native", "svamp"], default="native")
    p.add_argument("--report", required=True, help="JSON report path (.txt and .svg written beside it)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve", help="solve one problem")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--constants", type=float, nargs="*", default=None,
                   help="constants available to the solver (default: the model's pool)")
    p.set_defaults(func=cmd_solve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DataError, ValueError, LookupError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
