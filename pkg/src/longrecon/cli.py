"""Command line entry point: ``longrecon run`` and ``longrecon inspect``.

Exit codes: 0 success, 2 configuration or input error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import io as lra
from .experiments import (MODES, ConfigError, PipelineError, load_config, read_metrics_csv,
                          run_experiment)

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3


def _split_list(values) -> list[str]:
    out = []
    for v in values or []:
        out.extend(p for p in v.split(",") if p)
    return out


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longrecon",
                                description="Longitudinal subspace reconstruction experiments on synthetic radial data.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config and write its artifact tree")
    r.add_argument("config", type=Path, help="YAML experiment config")
    r.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")
    r.add_argument("--seeds", default=None, help="comma-separated seeds (overrides the config)")
    r.add_argument("--modes", nargs="+", default=None, metavar="MODE",
                   help=f"modes to run, space or comma separated; any of {', '.join(MODES)}")
    r.add_argument("--workers", type=int, default=None, help="parallel seed workers (overrides the config)")
    i = sub.add_parser("inspect", help="pretty-print an artifact header, sidecar, table or run directory")
    i.add_argument("artifact", type=Path)
    return p


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    changes = {}
    if args.seeds is not None:
        changes["seeds"] = _parse_seeds(args.seeds)
    if args.modes is not None:
        changes["modes"] = tuple(_split_list(args.modes))
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.out is not None:
        changes["output"] = str(args.out)
    if changes:
        try:
            cfg = replace(cfg, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    out = Path(cfg.output)
    result = run_experiment(cfg, out)
    print((out / "summary.txt").read_text(), end="")
    print(f"artifacts written to {out}")
    return EXIT_OK if result.seeds else EXIT_PIPELINE


def _sidecar_for(path: Path) -> Path | None:
    name = path.name
    candidates = [path.with_suffix(".yaml")]
    if name.count(".") >= 2:
        candidates.append(path.with_name(name.split(".")[0] + ".yaml"))
    for c in candidates:
        if c.exists() and c != path:
            return c
    return None


def inspect_artifact(path: Path) -> str:
    """Human-readable description of an artifact file or run directory."""
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    lines = []
    if path.is_dir():
        summary = path / "summary.txt"
        if not summary.exists():
            raise FileNotFoundError(f"{path} is not a run directory (no summary.txt)")
        lines.append(f"run directory: {path}")
        lines.append(summary.read_text().rstrip())
        return "\n".join(lines)
    suffix = path.suffix.lower()
    if suffix == ".lra":
        h = lra.read_header(path)
        lines += [f"file: {path}", "format: LRA1", f"rank: {h['rank']}", f"dtype: {h['dtype']}",
                  f"dims: {' x '.join(str(d) for d in h['dims'])}", f"bytes: {path.stat().st_size}"]
        side = _sidecar_for(path)
        if side is not None:
            lines.append(f"sidecar: {side}")
            lines.append(yaml.safe_dump(lra.read_sidecar(side), sort_keys=False).rstrip())
    elif suffix in (".yaml", ".yml"):
        lines += [f"file: {path}", yaml.safe_dump(lra.read_sidecar(path), sort_keys=False).rstrip()]
    elif suffix == ".csv":
        text = path.read_text().splitlines()
        if text and text[0].startswith("# schema:"):
            rows = read_metrics_csv(path)
            lines += [f"file: {path}", text[0][2:], f"columns: {text[1]}", f"rows: {len(rows)}"]
        else:
            lines += [f"file: {path}", f"columns: {text[0] if text else ''}", f"rows: {max(0, len(text) - 1)}"]
    else:
        raise ValueError(f"don't know how to inspect {path.name}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    print(inspect_artifact(args.artifact))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_inspect(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (OSError, ValueError) as exc:
        if args.command == "inspect":
            print(f"inspect error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
