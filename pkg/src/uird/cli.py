"""Command-line entry point.

Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure
(including training divergence).
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .ingest import (IngestError, arrays_to_beats, beats_to_arrays, extract_beats, load_beatset_csv,
                     read_annotations, read_wfdb212, save_beatset_csv, stratified_split)
from .madegan import TrainingDivergedError
from .metrics import TaskReport, emit_forgetting_table, emit_task_table
from .pipeline import TaskStream, UIRDPipeline
from .synthetic import make_beatset, make_record, write_record

log = logging.getLogger("uird")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(ValueError):
    pass


# ------------------------------------------------------------------ data


def load_dataset(cfg: RunConfig):
    """(X, y, ingest summaries) for the configured data source."""
    d = cfg.data
    summaries = {}
    if d.format == "synthetic":
        X, y = make_beatset(dict(d.synthetic_counts), seed=cfg.seed)
    elif d.format == "beatset":
        X, y = beats_to_arrays(load_beatset_csv(d.path, d.alphabet))
    else:
        ing = cfg.ingest
        beats = []
        for rec in d.records:
            signals = read_wfdb212(Path(d.path) / f"{rec}.dat", ing.n_channels, [ing.gain] * ing.n_channels,
                                   [ing.baseline] * ing.n_channels, ing.sampling_rate_hz)
            ann = read_annotations(Path(d.path) / f"{rec}.ann", d.alphabet)
            got, summary = extract_beats(signals[ing.channel], ann, ing.peak_source, ing.cutoff_hz,
                                         ing.filter_order, ing.tolerance_s)
            beats += got
            summaries[rec] = summary.__dict__
        if not beats:
            raise ValidationError("no beats were extracted from the configured records")
        X, y = beats_to_arrays(beats)
    if d.classes is not None:
        keep = np.isin(y, np.asarray(d.classes, dtype=object))
        X, y = X[keep], y[keep]
    return X, y, summaries


def build_stream(cfg: RunConfig, X, y) -> TaskStream:
    present = list(dict.fromkeys(y.tolist()))
    if len(present) < 2:
        raise ValidationError("need ≥ 2 classes")
    if cfg.data.classes is not None:
        missing = [c for c in cfg.data.classes if c not in present]
        if missing:
            raise ValidationError(f"configured class(es) {missing} have no beats")
    if cfg.data.task_order == "given":
        order = cfg.data.classes or [c for c in cfg.data.alphabet if c in present]
        return TaskStream.from_labeled(X, y, order=order)
    return TaskStream.from_labeled(X, y, ordering="sample_size")


# ------------------------------------------------------------------ commands


def cmd_ingest(cfg: RunConfig, args) -> int:
    X, y, summaries = load_dataset(cfg)
    tr, te = stratified_split(y, cfg.data.split_ratio, cfg.seed)
    out = Path(args.out) if args.out else cfg.run_dir() / "beats"
    out.mkdir(parents=True, exist_ok=True)
    save_beatset_csv(out / "train.csv", arrays_to_beats(X[tr], y[tr]))
    save_beatset_csv(out / "test.csv", arrays_to_beats(X[te], y[te]))
    counts = {c: int(np.sum(y == c)) for c in sorted(set(y.tolist()))}
    summary = {"beats_per_class": counts, "n_train": int(tr.size), "n_test": int(te.size),
               "records": summaries, "seed": cfg.seed, "split_ratio": cfg.data.split_ratio}
    (out / "ingest_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    print(f"wrote {tr.size} train and {te.size} test beats to {out}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    counts = parse_counts(args.counts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.record:
        sig, ann = make_record(counts, seed=args.seed)
        header = write_record(out, args.name, sig, ann)
        (out / f"{args.name}.json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
        print(f"wrote record {out / header['dat']} with {len(ann)} annotated beats")
    else:
        X, y = make_beatset(counts, seed=args.seed)
        path = out / f"{args.name}.csv"
        save_beatset_csv(path, arrays_to_beats(X, y, synthetic=True), provenance=True)
        print(f"wrote {X.shape[0]} beats to {path}")
    return EXIT_OK


def cmd_run(cfg: RunConfig, strategy: str, overwrite: bool = False) -> int:
    cfg.strategy = strategy
    X, y, _ = load_dataset(cfg)
    stream = build_stream(cfg, X, y)
    run_dir = cfg.run_dir()
    if (run_dir / "manifest.json").exists() and not overwrite:
        raise ValidationError(f"run directory {run_dir} already holds a run; pass --overwrite or pick a new name")
    if (run_dir / "manifest.json").exists():
        # only directories recognisable as earlier runs are cleared
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
    pipe = UIRDPipeline(cfg.pipeline_config(), run_dir=run_dir, config_record=cfg.to_dict())
    reports = pipe.run_sequence(stream)
    print(emit_task_table(reports), end="")
    print(f"run written to {run_dir}")
    return EXIT_OK


def load_run_reports(run_dir) -> tuple[dict, list[TaskReport]]:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise ValidationError(f"{run_dir} has no manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    reports = [TaskReport.from_json(p.read_text(encoding="utf-8"))
               for p in sorted(run_dir.glob("task_*/report.json"),
                               key=lambda p: int(p.parent.name.split("_")[1]))]
    return manifest, reports


def cmd_report(args) -> int:
    grouped, alphabet = {}, None
    for rd in args.runs:
        manifest, reports = load_run_reports(rd)
        order = manifest["class_order"]
        if alphabet is None:
            alphabet = order
        elif order != alphabet:
            raise ValidationError(f"class order {order} of {rd} does not match {alphabet}")
        name = manifest["strategy"]
        if name in grouped:
            name = f"{name} ({Path(rd).name})"
        grouped[name] = reports
    text = emit_task_table(grouped, args.format)
    if args.table in ("forgetting", "both"):
        forgetting = emit_forgetting_table(grouped, args.format)
        text = forgetting if args.table == "forgetting" else text + "\n" + forgetting
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


def parse_counts(text: str) -> dict[str, int]:
    counts = {}
    for part in text.split(","):
        sym, _, n = part.partition("=")
        if not sym.strip() or not n.strip().isdigit() or int(n) <= 0:
            raise ValidationError(f"bad class count {part!r}; expected SYMBOL=COUNT")
        counts[sym.strip()] = int(n)
    return counts


# ------------------------------------------------------------------ wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uird", description="Class-incremental ECG beat classification.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. madegan.epochs=5 (repeatable)")
        return sp

    ing = with_config(sub.add_parser("ingest", help="extract, standardize and split beats"))
    ing.add_argument("--out", help="output directory (default: <run dir>/beats)")

    syn = sub.add_parser("synth-data", help="write a synthetic beat set or WFDB-212 record")
    syn.add_argument("--out", required=True)
    syn.add_argument("--counts", default="N=500,L=300,R=200", help="e.g. N=500,L=300,R=200")
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--name", default="synthetic")
    syn.add_argument("--record", action="store_true", help="write a continuous record instead of beats")

    for name, helptext in (("run-uird", "run the replay pipeline"),
                           ("run-baseline", "run a comparison strategy")):
        sp = with_config(sub.add_parser(name, help=helptext))
        sp.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
        if name == "run-baseline":
            sp.add_argument("--strategy", required=True, choices=["ewc", "joint", "madegan_only"])

    rep = sub.add_parser("report", help="merge run directories into comparison tables")
    rep.add_argument("runs", nargs="+")
    rep.add_argument("--format", choices=["markdown", "csv", "json"], default="markdown")
    rep.add_argument("--table", choices=["task", "forgetting", "both"], default="both")
    rep.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth-data":
            return cmd_synth_data(args)
        if args.command == "report":
            return cmd_report(args)
        cfg = RunConfig.from_file(args.config, args.overrides).validate()
        if args.command == "ingest":
            return cmd_ingest(cfg, args)
        strategy = "uird" if args.command == "run-uird" else args.strategy
        return cmd_run(cfg, strategy, args.overwrite)
    except (ConfigError, ValidationError, IngestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
