"""Command-line entry point.

Every subcommand that touches a run reads the same YAML config; the flags
``--cache-root``, ``--seed``, ``--offline``, ``--attacks`` and
``--fpr-budget`` override the corresponding config fields.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .dataset import LABELS, Dataset, QuerySequence, load_dataset, save_dataset, segment_text, validate_dataset
from .errors import ConfigError, TraceMIAError
from .pipeline import EXIT_FATAL, EXIT_OK, RunConfig, emit_report, run_pipeline, write_demo_workspace
from .simulator import SimulationSettings

log = logging.getLogger("tracemia")


def _run_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", required=True, type=Path, help="run configuration (YAML)")
    p.add_argument("--cache-root", type=Path, help="override cache_root")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--offline", action="store_true", help="forbid network; serve from cache or simulator only")
    p.add_argument("--attacks", help="comma-separated attack ids, overriding the config list")
    p.add_argument("--fpr-budget", type=float, help="FPR budget for TPR@FPR (default 0.05)")
    p.add_argument("--output-dir", type=Path, help="override output_dir")
    return p


def _load_config(args) -> RunConfig:
    return RunConfig.load(
        args.config,
        cache_root=args.cache_root,
        seed=args.seed,
        offline=args.offline,
        attacks=args.attacks,
        fpr_budget=args.fpr_budget,
        output_dir=args.output_dir,
    )


def _print_summary(result) -> int:
    m = result.manifest
    print(f"output: {result.output_dir}")
    print(f"config hash: {m['config_hash'][:16]}  backend calls: {m['backend_calls']}  "
          f"network calls: {m['network_calls']}")
    for stage, skipped in sorted(m["skipped"].items()):
        print(f"skipped ({stage}): {len(skipped)} sequences", file=sys.stderr)
    for note in m["notes"]:
        print(f"note: {note}", file=sys.stderr)
    return result.exit_code


def cmd_run(args, stages) -> int:
    cfg = _load_config(args)
    result = run_pipeline(cfg, stages)
    if "report" in stages and (result.output_dir / "report.txt").exists():
        print((result.output_dir / "report.txt").read_text(encoding="utf-8"))
    return _print_summary(result)


def cmd_report(args) -> int:
    out = args.output_dir
    if out is None:
        if args.config is None:
            raise ConfigError("give --output-dir or --config")
        out = RunConfig.load(args.config).output_dir
    print(emit_report(out), end="")
    return EXIT_OK


def _read_documents(paths: list[Path]) -> list[tuple[str, str, str | None]]:
    """``(document_id, text, label)`` from text files or a JSONL of documents."""
    docs = []
    for path in paths:
        if path.suffix == ".jsonl":
            with open(path, encoding="utf-8") as f:
                for lineno, line in enumerate(f, start=1):
                    if line.strip():
                        try:
                            o = json.loads(line)
                            docs.append((o["document_id"], o["text"], o.get("label")))
                        except (ValueError, KeyError) as e:
                            raise ConfigError(f"{path}:{lineno}: {e}") from None
        else:
            docs.append((path.stem, path.read_text(encoding="utf-8"), None))
    return docs


def cmd_segment(args) -> int:
    lengths = tuple(int(x) for x in args.lengths.split(","))
    seqs: list[QuerySequence] = []
    for doc_id, text, label in _read_documents(args.inputs):
        label = args.label or label
        if label is not None and label not in LABELS:
            raise ConfigError(f"document {doc_id!r} has unknown label {label!r}")
        for s in segment_text(text, doc_id, lengths):
            seqs.append(QuerySequence(s.id, s.text, s.token_length, s.document_id, label, args.source))
    dataset = Dataset(seqs, {"tokenizer": "whitespace", "lengths": args.lengths})
    save_dataset(dataset, args.output)
    print(f"wrote {len(seqs)} sequences to {args.output}")
    return EXIT_OK


def cmd_validate(args) -> int:
    report = validate_dataset(load_dataset(args.path))
    print(json.dumps(asdict(report), indent=2, sort_keys=True))
    return EXIT_OK if report.ok else EXIT_FATAL


def cmd_demo(args) -> int:
    settings = SimulationSettings(
        seed=args.seed,
        mix_member=args.mix_member,
        mix_non_member=args.mix_non_member,
    )
    attacks = args.attacks.split(",") if args.attacks else None
    path = write_demo_workspace(args.directory, seed=args.seed, settings=settings, attacks=attacks,
                                defense=args.defense, n_member=args.n_member, n_non_member=args.n_non_member)
    print(f"wrote demo workspace, config at {path}")
    if not args.run:
        return EXIT_OK
    cfg = RunConfig.load(path, offline=args.offline, fpr_budget=args.fpr_budget)
    result = run_pipeline(cfg)
    print((result.output_dir / "report.txt").read_text(encoding="utf-8"))
    return _print_summary(result)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracemia",
        description="Membership inference against reasoning models from their reasoning traces.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    run_flags = _run_flags()

    ds = sub.add_parser("dataset", help="dataset preparation").add_subparsers(dest="action", required=True)
    seg = ds.add_parser("segment", help="cut documents into fixed-length sequences")
    seg.add_argument("inputs", nargs="+", type=Path,
                     help="text files (one document each) or .jsonl with document_id, text, label")
    seg.add_argument("-o", "--output", required=True, type=Path)
    seg.add_argument("--lengths", default="32,64,128")
    seg.add_argument("--label", choices=LABELS)
    seg.add_argument("--source")
    seg.set_defaults(func=cmd_segment)
    val = ds.add_parser("validate", help="report duplicates, empty texts and label balance")
    val.add_argument("path", type=Path)
    val.set_defaults(func=cmd_validate)

    anchors = sub.add_parser("anchors", help="anchor construction").add_subparsers(dest="action", required=True)
    anchors.add_parser("build", parents=[run_flags], help="build the recall-inference axis") \
        .set_defaults(func=lambda a: cmd_run(a, ("anchors",)))

    attack = sub.add_parser("attack", help="membership scoring").add_subparsers(dest="action", required=True)
    attack.add_parser("run", parents=[run_flags], help="score the dataset (builds the axis if missing)") \
        .set_defaults(func=lambda a: cmd_run(a, ("attack",)))

    sub.add_parser("eval", parents=[run_flags], help="compute metrics from score files") \
        .set_defaults(func=lambda a: cmd_run(a, ("eval",)))

    sub.add_parser("run", parents=[run_flags], help="all stages: anchors, attack, eval, report") \
        .set_defaults(func=lambda a: cmd_run(a, ("anchors", "attack", "eval", "report")))

    rep = sub.add_parser("report", help="print the metrics tables of a finished run")
    rep.add_argument("--output-dir", type=Path)
    rep.add_argument("--config", type=Path)
    rep.set_defaults(func=cmd_report)

    sim = sub.add_parser("simulate", help="offline simulator").add_subparsers(dest="action", required=True)
    demo = sim.add_parser("demo", help="write (and optionally run) a simulator benchmark")
    demo.add_argument("directory", type=Path)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--mix-member", type=float, default=0.15)
    demo.add_argument("--mix-non-member", type=float, default=0.85)
    demo.add_argument("--n-member", type=int, default=100)
    demo.add_argument("--n-non-member", type=int, default=100)
    demo.add_argument("--attacks")
    demo.add_argument("--defense", choices=("mild", "strong"))
    demo.add_argument("--run", action="store_true", help="run the full pipeline after writing")
    demo.add_argument("--offline", action="store_true")
    demo.add_argument("--fpr-budget", type=float)
    demo.set_defaults(func=cmd_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TraceMIAError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FATAL
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
