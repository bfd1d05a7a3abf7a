"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, RunConfig, __version__, config_hash

log = logging.getLogger("cyclepose")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _int_list(s: str) -> List[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cyclepose", description="Multi-cycle pose transformer toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, out_default):
        sp.add_argument("--config", help="run config JSON (model/train/data sections)")
        sp.add_argument("--seed", type=int, help="override model and train seeds")
        sp.add_argument("--out", default=out_default, help="output directory")

    t = sub.add_parser("train", help="train a model")
    common(t, "runs/train")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    common(e, "runs/eval")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--cycles", type=int, help="cycles to run (default: checkpoint's)")

    a = sub.add_parser("ablate", help="run an ablation suite")
    common(a, "runs/ablate")
    a.add_argument("--suite", required=True, choices=["losses", "cycles", "distil_chain"])
    a.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    a.add_argument("--rows", help="comma-separated subset of row ids")

    x = sub.add_parser("export-attn", help="export attention maps as CSV")
    common(x, "runs/attn")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--sample-seed", type=int, default=0)
    x.add_argument("--cycles", type=_int_list, help="cycles to export (default: all)")
    x.add_argument("--per-head", action="store_true")

    s = sub.add_parser("param-stats", help="per-layer weight statistics")
    common(s, "runs/param_stats")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--compare", help="second checkpoint for side-by-side statistics")
    s.add_argument("--tau", type=float, default=0.01)
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--layers", type=_int_list)

    g = sub.add_parser("gen-data", help="dump the train/val splits")
    common(g, "runs/data")
    return p


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(model=cfg.model.replace(seed=args.seed), train=cfg.train.replace(seed=args.seed))
    return cfg


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> None:
    from .data import make_split
    from .train import train

    cfg = _run_config(args)
    out = Path(args.out)
    _write_json(out / "config.json", {**cfg.to_dict(), "config_hash": config_hash(cfg.to_dict()),
                                      "tool_version": __version__})
    d = cfg.data
    res = train(cfg.model, cfg.train, make_split(d.n_train, d.n_val, d.base_seed, d), out_dir=out,
                extra_meta={"config_hash": config_hash(cfg.to_dict())})
    log.info("done: best cycle-1 pck@0.1 %.3f at step %d", res.best_report.pck_at(0.1), res.best_step)


def cmd_eval(args) -> None:
    import csv

    from .data import make_split
    from .metrics import PCK_RADII, evaluate
    from .model import load_checkpoint

    cfg = _run_config(args)
    model, meta = load_checkpoint(_need_file(args.checkpoint))
    d = cfg.data
    _, val = make_split(d.n_train, d.n_val, d.base_seed, d)
    report = evaluate(model, val, args.cycles)
    out = Path(args.out)
    _write_json(out / "eval_report.json", {"config_hash": meta["config_hash"], "tool_version": __version__,
                                           "checkpoint": str(args.checkpoint), **report.to_dict()})
    with open(out / "eval_report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        cols = ["cycle"] + [f"pck@{r}" for r in PCK_RADII] + ["mean_pixel_error"]
        w.writerow(["config_hash", "tool_version"] + cols)
        for row in report.csv_rows():
            w.writerow([meta["config_hash"], __version__] + [row[c] for c in cols])
    log.info("cycle-1 pck@0.1 %.3f", report.pck_at(0.1))


def cmd_ablate(args) -> None:
    from .ablation import run_ablation

    cfg = _run_config(args)
    rows = args.rows.split(",") if args.rows else None
    rep = run_ablation(args.suite, cfg, args.seeds, out_dir=args.out, rows=rows)
    for r in rep.rows:
        log.info("%-22s pck@0.1 %.3f", r.spec.row_id, r.pck(0.1))


def cmd_export_attn(args) -> None:
    from .analysis import export_attention

    cfg = _run_config(args)
    files = export_attention(_need_file(args.checkpoint), args.sample_seed, args.out, args.cycles,
                             args.per_head, cfg.data if args.config else None)
    log.info("wrote %d files to %s", len(files), args.out)


def cmd_param_stats(args) -> None:
    from .analysis import param_stats, write_param_stats

    b = _need_file(args.compare) if args.compare else None
    stats = param_stats(_need_file(args.checkpoint), b, args.layers, args.tau, args.bins)
    write_param_stats(stats, args.out)
    if b is not None:
        log.info("near-zero fraction: a %.4f  b %.4f", stats["near_zero_fraction_a"], stats["near_zero_fraction_b"])


def cmd_gen_data(args) -> None:
    from .data import make_split

    cfg = _run_config(args)
    d = cfg.data
    train_ds, val_ds = make_split(d.n_train, d.n_val, d.base_seed, d)
    out = Path(args.out)
    train_ds.dump(out / "train.blob")
    val_ds.dump(out / "val.blob")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-attn": cmd_export_attn,
    "param-stats": cmd_param_stats,
    "gen-data": cmd_gen_data,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"cyclepose {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
