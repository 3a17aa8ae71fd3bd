"""Command line: ``run``, ``synth`` and ``report`` subcommands.

Exit codes: 0 success, 1 configuration or usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataio import SynthTrial, write_trial
from .errors import ConfigError, Nof1Error
from .pipeline import PipelineConfig, run
from .report import emit_report, format_table, load_report, pvalue_rows


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nof1embed", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the full pipeline from a JSON config")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--out", type=Path, default=None, help="override output_dir")

    s = sub.add_parser("synth", help="write a synthetic trial dataset")
    s.add_argument("--spec", required=True, type=Path, help="JSON synthetic trial description")
    s.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("report", help="re-render tables and figures from a report directory")
    p.add_argument("--in", dest="in_dir", required=True, type=Path)
    p.add_argument("--no-figures", action="store_true")
    return ap


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _cmd_run(args) -> None:
    config = PipelineConfig.from_file(args.config, seed=args.seed)
    if args.out is not None:
        config.output_dir = str(args.out)

    def log_epoch(entry):
        logging.getLogger("nof1embed.train").info("%s", entry)

    report = run(config, log_epochs=log_epoch)
    sys.stdout.write(format_table(pvalue_rows(report)))


def _cmd_synth(args) -> None:
    trial = SynthTrial.from_dict(_read_json(args.spec))
    samples = trial.generate()
    write_trial(samples, args.out)
    print(f"wrote {len(samples)} images for {len(trial.participants)} participants to {args.out}")


def _cmd_report(args) -> None:
    report = load_report(args.in_dir)
    emit_report(report, args.in_dir, figures=not args.no_figures)
    sys.stdout.write(format_table(pvalue_rows(report)))


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    handlers = {"run": _cmd_run, "synth": _cmd_synth, "report": _cmd_report}
    try:
        handlers[args.command](args)
    except Nof1Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0
