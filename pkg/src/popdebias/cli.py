"""Command-line entry point: ``popdebias <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error (bad config, bad input data),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .dataset import (DEFAULT_SCHEMA, compute_quality_ratio, fill_undefined_ratio, load_interactions,
                      minmax_normalize, popularity_floor, popularity_table, split_stages, write_interactions)
from .experiment import (ConfigError, StageError, write_popularity, evaluate_models, fairness_for,
                         grid_search, load_config, load_models, prepare, run, save_models, train_models)
from .popularity import drift_series, forecast_popularity
from .synth import generate

logger = logging.getLogger("popdebias")


def _common(default=None) -> argparse.ArgumentParser:
    # subcommands get SUPPRESS so a flag given before the subcommand is kept
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default, help="key=value configuration file")
    p.add_argument("--seed", type=int, default=default, help="root seed (overrides the config)")
    p.add_argument("--threads", type=int, default=default, help="worker processes for grid points")
    p.add_argument("--out", default=default, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=default or False)
    return p


def _data_flags(p: argparse.ArgumentParser, stages: bool = True) -> None:
    p.add_argument("--input", help="interaction log (TSV/CSV)")
    p.add_argument("--header", action="store_true", help="input has a header row")
    p.add_argument("--min-interactions", type=int, default=0)
    p.add_argument("--schema", default=",".join(DEFAULT_SCHEMA),
                   help="comma-separated column order")
    if stages:
        p.add_argument("--stages", type=int, default=10, help="number of stages T")
        p.add_argument("--popularity-from", choices=("clicks", "post"), default="clicks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popdebias", parents=[_common()],
                                     description="Popularity deconfounding and multi-behavior debiasing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(argparse.SUPPRESS)

    p = sub.add_parser("ingest", parents=[common], help="re-index a raw log and write the id mapping")
    _data_flags(p, stages=False)

    p = sub.add_parser("stats", parents=[common], help="per-stage popularity and quality tables")
    _data_flags(p)

    p = sub.add_parser("drift", parents=[common], help="popularity drift (JSD) per stage")
    _data_flags(p)
    p.add_argument("--log-base", choices=("e", "2"), default="e")

    p = sub.add_parser("forecast", parents=[common], help="next-stage popularity forecast")
    _data_flags(p)
    p.add_argument("--alpha", type=float, default=0.0)

    sub.add_parser("train", parents=[common], help="train and write checkpoints and trace.csv")

    for name, text in (("evaluate", "top-K accuracy from checkpoints"),
                       ("fairness", "exposure and quality disparity from checkpoints")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoints", required=True, help="directory of .ckpt files")

    sub.add_parser("synth", parents=[common], help="generate a synthetic log with ground truth")
    sub.add_parser("run", parents=[common], help="full pipeline")
    sub.add_parser("grid", parents=[common], help="hyper-parameter grid search")
    return parser


def _config(args):
    overrides = {"seed": args.seed, "threads": args.threads, "out": args.out}
    return load_config(args.config, overrides)


def _load(args):
    if not args.input:
        raise ConfigError("--input is required")
    schema = tuple(s.strip() for s in args.schema.split(","))
    return load_interactions(args.input, schema=schema, header=args.header,
                             min_interactions=args.min_interactions)


def _out(args, default=None) -> Path | None:
    path = args.out or default
    if path is None:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ingest(args) -> None:
    log, mapping = _load(args)
    out = _out(args, ".")
    write_interactions(log, out / "interactions.tsv")
    mapping.write(out / "id_map.tsv")
    print(f"{len(log)} records, {log.num_users} users, {log.num_items} items")


def cmd_stats(args) -> None:
    log, _ = _load(args)
    staged = split_stages(log.sorted(), args.stages)
    pop = popularity_table(staged, args.popularity_from)
    out = _out(args, ".")
    write_popularity(pop, out / "popularity.tsv")
    r_raw, defined = compute_quality_ratio(log)
    clicks, posts = log.item_counts("clicks"), log.item_counts("post")
    r = minmax_normalize(fill_undefined_ratio(r_raw, defined, log))
    z = minmax_normalize(clicks)
    with open(out / "quality.tsv", "w") as fh:
        fh.write("item\tclicks\tpost_clicks\tratio\tdefined\tr\tz\n")
        for i in range(log.num_items):
            raw = "" if not defined[i] else f"{r_raw[i]:.12g}"
            fh.write(f"{i}\t{clicks[i]}\t{posts[i]}\t{raw}\t{int(defined[i])}\t{r[i]:.12g}\t{z[i]:.12g}\n")


def cmd_drift(args) -> None:
    log, _ = _load(args)
    pop = popularity_table(split_stages(log.sorted(), args.stages), args.popularity_from)
    series = drift_series(pop, args.log_base)
    out = _out(args)
    if out is None:
        print("stage,dp_successive,dp_accumulated")
        for k, (a, b) in enumerate(zip(series.successive, series.accumulated), start=2):
            print(f"{k},{a:.12g},{b:.12g}")
    else:
        series.to_csv(out / "drift.csv")


def cmd_forecast(args) -> None:
    log, _ = _load(args)
    if args.stages < 2:
        raise ConfigError("forecasting needs at least two stages")
    pop = popularity_table(split_stages(log.sorted(), args.stages), args.popularity_from)
    T = pop.T
    fc = forecast_popularity(pop.m[T - 1], pop.m[T - 2], args.alpha, popularity_floor(pop.D[T - 1]))
    lines = ["item\tm_tilde"] + [f"{i}\t{v:.12g}" for i, v in enumerate(fc.m_tilde.tolist())]
    out = _out(args)
    if out is None:
        print("\n".join(lines))
    else:
        (out / "forecast.tsv").write_text("\n".join(lines) + "\n")


def cmd_train(args) -> None:
    cfg = _config(args)
    cfg.validate()
    out = _out(args, cfg.out)
    (out / "manifest.cfg").write_text(cfg.to_text())
    prep = prepare(cfg)
    result = train_models(cfg, prep)
    result.trace.to_csv(out / "trace.csv")
    save_models(result.models, out / "checkpoints")


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    cfg.validate()
    out = _out(args, cfg.out)
    prep = prepare(cfg)
    report = evaluate_models(cfg, prep, load_models(args.checkpoints))
    report.to_csv(out / "ranking.csv")
    report.lists_to_tsv(out / "lists.tsv")


def cmd_fairness(args) -> None:
    cfg = _config(args)
    cfg.validate()
    out = _out(args, cfg.out)
    prep = prepare(cfg)
    if not (prep.train.post_clicked == 1).any():
        raise ConfigError("fairness needs post-click labels in the training data")
    report, groups = fairness_for(cfg, prep, load_models(args.checkpoints))
    report.to_csv(out / "fairness.csv")
    groups.to_tsv(out / "groups.tsv")


def cmd_synth(args) -> None:
    cfg = _config(args)
    cfg.validate()
    out = _out(args, cfg.out)
    log, truth = generate(cfg.synth_config())
    write_interactions(log, out / "interactions.tsv")
    truth.write(out)


def cmd_run(args) -> None:
    cfg = _config(args)
    run(cfg, args.out or cfg.out)


def cmd_grid(args) -> None:
    cfg = _config(args)
    best, _ = grid_search(cfg, _out(args, cfg.out))
    print(" ".join(f"{k}={v!r}" for k, v in best.items()))


COMMANDS = {"ingest": cmd_ingest, "stats": cmd_stats, "drift": cmd_drift, "forecast": cmd_forecast,
            "train": cmd_train, "evaluate": cmd_evaluate, "fairness": cmd_fairness, "synth": cmd_synth,
            "run": cmd_run, "grid": cmd_grid}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.cause, (ValueError, FileNotFoundError)) else 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
