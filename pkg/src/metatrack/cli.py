"""Command-line entry point: ``metatrack <subcommand> [options]``.

Every subcommand writes comma-separated results to stdout (or files) and exits
0 on success; failures print one JSON line ``{"error": ..., "message": ...}``
to stderr and exit non-zero. Set ``METATRACK_LOG`` (e.g. ``INFO``) for logs.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import checkpoint as ckio
from . import config as config_mod
from . import oracles
from .evaluation import (THRESHOLDS, curve_rows, frame_rows, load_dataset, load_record,
                         report_rows, rows_to_text, run_ope, write_csv)
from .metatrain import Trainer, split_checkpoint
from .plotting import alpha_plot, success_plot
from .synthdata import export_sequence, generate_benchmark, generate_sequence
from .tracker import TrackerSpec, run_sequence
from .updaters import STRATEGIES, Projector

log = logging.getLogger("metatrack")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CLIError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("METATRACK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _parse_alphas(text, default):
    if text in (None, "", "config"):
        return tuple(default)
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        n = int(round((hi - lo) / step)) + 1
        return tuple(round(lo + i * step, 10) for i in range(n))
    return tuple(float(v) for v in text.split(","))


def _spec(cfg, strategy, alpha=None, checkpoint=None):
    net = None
    interval = cfg.updater.interval
    ext = cfg.extractor()
    if strategy == "learned":
        if not checkpoint:
            raise CLIError("--strategy learned needs --checkpoint")
        net, ext, tcfg, _, _ = split_checkpoint(ckio.load(checkpoint))
        if cfg.updater.interval == config_mod.UpdaterConfig().interval:
            interval = tcfg.interval  # the interval the net was trained with
    projector = Projector(cfg.updater.projection, cfg.cf)
    return TrackerSpec(ext, cfg.tracker, strategy, projector,
                       cfg.updater.alpha if alpha is None else alpha, interval, net, cfg.sgd)


def _dataset(args, cfg):
    if args.dataset:
        records, skipped = load_dataset(args.dataset)
        if not records:
            raise CLIError(f"no sequences found under {args.dataset}")
        return records, skipped
    base = cfg.eval.base_seed if args.seed is None else args.seed
    count = cfg.eval.sequences if args.sequences is None else args.sequences
    return generate_benchmark(cfg.synth, count, base), []


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth_gen(args, cfg):
    base = cfg.eval.base_seed if args.seed is None else args.seed
    count = cfg.eval.sequences if args.sequences is None else args.sequences
    os.makedirs(args.out, exist_ok=True)
    rows = [["sequence", "frames", "path"]]
    for i in range(count):
        seq = generate_sequence(dataclasses.replace(cfg.synth, seed=base + i),
                                f"{args.prefix}{base + i:05d}")
        path = os.path.join(args.out, seq.name)
        export_sequence(seq, path)
        rows.append([seq.name, str(len(seq)), path])
    sys.stdout.write(rows_to_text(rows))


def cmd_train(args, cfg):
    tcfg = cfg.train
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    out = args.checkpoint
    if not out:
        raise CLIError("train needs --checkpoint <file> for the output")
    if args.resume and os.path.exists(out):
        trainer = Trainer.from_checkpoint(ckio.load(out), cfg.synth,
                                          Projector(cfg.updater.projection, cfg.cf),
                                          threads=args.threads)
    else:
        trainer = Trainer(tcfg, cfg.synth, cfg.extractor(),
                          Projector(cfg.updater.projection, cfg.cf), threads=args.threads)
    log_path = args.log or os.path.splitext(out)[0] + "_log.csv"
    t0 = time.perf_counter()
    try:
        rows = trainer.run(log_path=log_path, checkpoint_path=out, max_steps=args.max_steps,
                           time_budget=args.time_budget)
    finally:
        trainer.close()
    last = rows[-1] if rows else {}
    sys.stdout.write(rows_to_text([
        ["checkpoint", "steps", "epoch", "seconds", "last_loss"],
        [out, str(trainer.step), str(trainer.epoch), f"{time.perf_counter() - t0:.1f}",
         f"{last.get('loss', float('nan')):.6f}"]]))


def cmd_track(args, cfg):
    spec = _spec(cfg, args.strategy, args.alpha, args.checkpoint)
    if args.sequence:
        seq = load_record(args.sequence).load()
    else:
        seed = 0 if args.seed is None else args.seed
        seq = generate_sequence(dataclasses.replace(cfg.synth, seed=seed))
    run = run_sequence(spec, seq.frames, seq.boxes[0])
    text = rows_to_text(frame_rows(run.boxes, run.confidences))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _write_report(report, out, label):
    os.makedirs(out, exist_ok=True)
    write_csv(os.path.join(out, "report.csv"), report_rows(report))
    write_csv(os.path.join(out, "curve.csv"), curve_rows(report))
    with open(os.path.join(out, "timing.txt"), "w") as fh:
        # wall-clock numbers live apart from the reports so those stay byte-stable
        fh.write(f"label={label}\nframes_per_second={report.fps:.1f}\n")
    success_plot([(label, report.auc, report.curve)], THRESHOLDS,
                 os.path.join(out, "success.svg"))


def cmd_eval(args, cfg):
    dataset, skipped = _dataset(args, cfg)
    out = args.out
    if args.alpha_grid is not None:
        alphas = _parse_alphas(args.alpha_grid, cfg.eval.alphas)
        base = run_ope(_spec(cfg, "none"), dataset, args.threads, "none")
        rows = [["alpha", "auc"]]
        reports = []
        for a in alphas:
            rep = run_ope(_spec(cfg, "ema", a), dataset, args.threads, f"ema{a:g}")
            reports.append(rep)
            rows.append([f"{a:g}", f"{rep.auc:.6f}"])
        best = max(range(len(alphas)), key=lambda i: (reports[i].auc, -i))
        rows.append(["none", f"{base.auc:.6f}"])
        rows.append([f"best={alphas[best]:g}", f"{reports[best].auc:.6f}"])
        if out:
            os.makedirs(out, exist_ok=True)
            write_csv(os.path.join(out, "alpha_grid.csv"), rows)
            alpha_plot(list(alphas), [r.auc for r in reports], os.path.join(out, "alpha.svg"),
                       base.auc)
            _write_report(reports[best], out, f"ema alpha={alphas[best]:g}")
        sys.stdout.write(rows_to_text(rows))
        return
    spec = _spec(cfg, args.strategy, args.alpha, args.checkpoint)
    report = run_ope(spec, dataset, args.threads, args.strategy)
    report.skipped = list(skipped) + list(report.skipped)
    if out:
        _write_report(report, out, args.label or args.strategy)
    sys.stdout.write(rows_to_text(report_rows(report)))


def _emit_records(records):
    rows = [["suite", "case", "error", "ok"]]
    for r in records:
        rows.append([r["suite"], r["case"], f"{r['error']:.3e}", "pass" if r["ok"] else "FAIL"])
    sys.stdout.write(rows_to_text(rows))
    failed = [r for r in records if not r["ok"]]
    if failed:
        raise CLIError(f"{len(failed)} check(s) failed, first: {failed[0]['case']}")


def cmd_gradcheck(args, cfg):
    _emit_records(oracles.gradient_suite(range(args.seeds)))


def cmd_oracle(args, cfg):
    records = oracles.cf_suite()
    for seed in range(3):
        records += oracles.bptt_suite(seed=seed)
    _emit_records(records)


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key/value config file")
    common.add_argument("--seed", type=int, help="base seed (u64)")
    common.add_argument("--threads", type=int, default=1)
    p = argparse.ArgumentParser(prog="metatrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", parents=[common], help="write a synthetic benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--sequences", type=int)
    s.add_argument("--prefix", default="synth")
    s.set_defaults(fn=cmd_synth_gen)

    s = sub.add_parser("train", parents=[common], help="meta-train the learned updater")
    s.add_argument("--checkpoint", help="output checkpoint (resumed with --resume)")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--log", help="training log CSV")
    s.add_argument("--epochs", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--time-budget", type=float, help="seconds")
    s.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("track", cmd_track, "track one sequence"),
                               ("eval", cmd_eval, "one-pass evaluation over a dataset")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--strategy", choices=STRATEGIES, default="none")
        s.add_argument("--checkpoint")
        s.add_argument("--alpha", type=float)
        s.add_argument("--out")
        s.set_defaults(fn=fn)
        if name == "track":
            s.add_argument("--sequence", help="OTB-layout sequence directory")
        else:
            s.add_argument("--dataset", help="directory of OTB-layout sequences")
            s.add_argument("--sequences", type=int, help="synthetic benchmark size")
            s.add_argument("--label")
            s.add_argument("--alpha-grid", nargs="?", const="config",
                           help="search EMA rates: 'lo:hi:step', a list, or the config grid")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--seeds", type=int, default=20)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("oracle", parents=[common], help="CF and truncated-BPTT oracle suites")
    s.set_defaults(fn=cmd_oracle)
    return p


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code:
            print(json.dumps({"error": "usage", "message": "invalid arguments"}), file=sys.stderr)
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if args.threads < 1:
            raise CLIError("--threads must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise CLIError("--seed must be an unsigned 64-bit integer")
        cfg = config_mod.load(args.config)
        args.fn(args, cfg)
    except (CLIError, config_mod.ConfigError, ckio.CheckpointError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
