"""Command-line entry point: ``volcal <command> [options]``.

Exit codes: 0 success, 2 usage, 3 config/data mismatch, 4 runtime divergence.
Machine outputs go to files; progress goes to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .core import MarketFrame, OptionKind, scale_quotes
from .dataio import (
    CalibrationReport,
    Coordinates,
    ExperimentConfig,
    RunResult,
    export_surface,
    load_config,
    read_keyvalues,
    read_quotes,
    write_keyvalues,
    write_provenance,
    write_quotes,
    write_report,
)
from .errors import (
    DivergedTraining,
    InvalidInput,
    NonFiniteGradient,
    NonFiniteParams,
    VersionMismatch,
    VolcalError,
    VolFieldFailure,
)
from .experiment import ExactReference, ablation, calibrate_once, evaluate
from .formats import FORMAT_LINE
from .montecarlo import (
    GridSpec,
    SimConfig,
    calibrated_field,
    constant_field,
    exact_field,
    generate_synthetic_dataset,
    reprice,
)
from .nets import NetConfig
from .trainer import load_checkpoint

log = logging.getLogger("volcal")

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config file (INI); flags override it")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    p.add_argument("--progress", type=int, default=500, help="progress stride in iterations (0: silent)")
    p.add_argument("--log-level", default="INFO")


def _add_market(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("market")
    g.add_argument("--s0", type=float, help="spot price S0")
    g.add_argument("--r", type=float, help="continuously compounded rate")
    g.add_argument("--kind", choices=[k.value for k in OptionKind])
    g.add_argument("--k-max", type=float, help="strike scale (default: max quoted strike)")
    g.add_argument("--t-max", type=float, help="maturity scale (default: max quoted maturity)")


def _add_sim(p: argparse.ArgumentParser, seed_flag: str = "--sim-seed") -> None:
    g = p.add_argument_group("simulation")
    g.add_argument("--paths", type=int, help="Monte Carlo paths")
    g.add_argument("--dt", type=float)
    g.add_argument("--horizon", type=float)
    g.add_argument(seed_flag, dest="sim_seed", type=int)
    g.add_argument("--scheme", choices=["log_euler", "euler"])


def _add_train(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lambda-dup", type=float)
    g.add_argument("--lambda-ini", type=float)
    g.add_argument("--lambda-arb", type=float)
    g.add_argument("--max-iters", type=int)
    g.add_argument("--m1", type=int)
    g.add_argument("--m2", type=int)
    g.add_argument("--lr0", type=float)
    g.add_argument("--seed", type=int, help="training seed (repeat i uses seed + i)")
    g.add_argument("--dtype", choices=["float32", "float64"])
    g.add_argument("--chunk-size", type=int)
    g.add_argument("--checkpoint-every", type=int)
    g.add_argument("--net-blocks", type=int)
    g.add_argument("--net-width", type=int)
    g.add_argument("--no-early-stop", action="store_true")
    g.add_argument("--freeze-vol-when-unregularized", action="store_true",
                   help="skip vol-network updates when lambda_dup = 0")


def _add_eval(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("evaluation")
    g.add_argument("--reference", choices=["exact", "none"], default="none",
                   help="'exact': synthetic run, compare against the exact local volatility")
    g.add_argument("--eval-grid", default=None, help="test grid, e.g. 256x256")
    g.add_argument("--k", dest="k_range", help="strike range lo:hi of the grids")
    g.add_argument("--t", dest="t_range", help="maturity range lo:hi of the grids")
    g.add_argument("--reprice-paths", type=int)
    g.add_argument("--reprice-seed", type=int,
                   help="default: the quote file's generation seed if known (common random numbers)")
    g.add_argument("--no-reprice", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volcal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"volcal {__version__} ({FORMAT_LINE[2:]})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthetic quotes from the exact local-vol model")
    _add_common(p)
    _add_market(p)
    _add_sim(p, seed_flag="--seed")
    p.add_argument("--grid", help="maturities x strikes, e.g. 10x20")
    p.add_argument("--k", dest="k_range", help="strike range lo:hi")
    p.add_argument("--t", dest="t_range", help="maturity range lo:hi")
    p.add_argument("--vol", default="exact", help="'exact' or 'constant:<sigma>'")
    p.add_argument("--out", type=Path, default=Path("quotes.csv"))

    for name, help_ in (("calibrate", "fit price and local-vol networks"),
                        ("ablate", "calibrate over several lambda_dup values and seeds")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        _add_market(p)
        _add_sim(p)
        _add_train(p)
        _add_eval(p)
        p.add_argument("--quotes", type=Path, required=True)
        p.add_argument("--repeats", type=int, default=1 if name == "calibrate" else 3)
        p.add_argument("--out", type=Path, help="output directory")
        if name == "ablate":
            p.add_argument("--lambdas", required=True, help="comma separated, e.g. 0,0.5,1")

    p = sub.add_parser("evaluate", help="RMSEs of a checkpoint")
    _add_common(p)
    _add_market(p)
    _add_sim(p)
    _add_eval(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--quotes", type=Path)
    p.add_argument("--grid", dest="eval_grid_alias", help="alias of --eval-grid")
    p.add_argument("--out", type=Path, default=Path("evaluation.csv"))

    p = sub.add_parser("reprice", help="Monte Carlo repricing under a calibrated local vol")
    _add_common(p)
    _add_market(p)
    _add_sim(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--quotes", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("reprice.csv"))

    p = sub.add_parser("export", help="write a surface grid as CSV")
    _add_common(p)
    _add_market(p)
    p.add_argument("--checkpoint", type=Path, help="omit with --surface exact-vol")
    p.add_argument("--surface", choices=["price", "vol", "exact-vol"], required=True)
    p.add_argument("--coords", choices=[c.value for c in Coordinates], default="original")
    p.add_argument("--grid", default="256x256")
    p.add_argument("--k", dest="k_range")
    p.add_argument("--t", dest="t_range")
    p.add_argument("--out", type=Path, default=Path("surface.csv"))
    return parser


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "s0", None) is not None:
        cfg.spot = args.s0
    if getattr(args, "r", None) is not None:
        cfg.rate = args.r
    if getattr(args, "kind", None):
        cfg.kind = OptionKind.parse(args.kind)
    if getattr(args, "k_max", None) is not None:
        cfg.k_max = args.k_max
    if getattr(args, "t_max", None) is not None:
        cfg.t_max = args.t_max
    sim_kw = {key: getattr(args, flag) for key, flag in
              (("n_paths", "paths"), ("dt", "dt"), ("horizon", "horizon"), ("seed", "sim_seed"),
               ("scheme", "scheme")) if getattr(args, flag, None) is not None}
    if sim_kw:
        cfg.sim = dataclasses.replace(cfg.sim, **sim_kw)
    train_kw = {key: getattr(args, key) for key in
                ("lambda_dup", "lambda_ini", "lambda_arb", "max_iters", "m1", "m2", "lr0", "seed",
                 "dtype", "chunk_size", "checkpoint_every") if getattr(args, key, None) is not None}
    if getattr(args, "no_early_stop", False):
        train_kw["early_stop"] = False
    if getattr(args, "freeze_vol_when_unregularized", False):
        train_kw["freeze_vol_when_unregularized"] = True
    net_kw = {key: getattr(args, f"net_{key}") for key in ("blocks", "width")
              if getattr(args, f"net_{key}", None) is not None}
    if net_kw:
        train_kw["net"] = dataclasses.replace(cfg.train.net, **net_kw)
    if train_kw:
        cfg.train = dataclasses.replace(cfg.train, **train_kw)
    grid_shape = getattr(args, "grid", None)
    k_range, t_range = getattr(args, "k_range", None), getattr(args, "t_range", None)
    if args.command == "generate" and (grid_shape or k_range or t_range):
        g = cfg.grid
        cfg.grid = GridSpec.parse(grid_shape or f"{g.n_t}x{g.n_k}", k_range or f"{g.k_lo}:{g.k_hi}",
                                  t_range or f"{g.t_lo}:{g.t_hi}")
    eval_shape = getattr(args, "eval_grid", None) or getattr(args, "eval_grid_alias", None)
    if eval_shape or (args.command != "generate" and (k_range or t_range)):
        g = cfg.eval_grid
        cfg.eval_grid = GridSpec.parse(eval_shape or f"{g.n_t}x{g.n_k}", k_range or f"{g.k_lo}:{g.k_hi}",
                                       t_range or f"{g.t_lo}:{g.t_hi}")
    return cfg


def _require_spot(cfg: ExperimentConfig) -> None:
    if cfg.spot is None:
        raise UsageError("--s0 is required (or set [market] spot in --config)")


def _load_quotes(path: Path, cfg: ExperimentConfig):
    _require_spot(cfg)
    qf = read_quotes(path, cfg.spot, cfg.kind)
    for rej in qf.rejected:
        log.warning("%s:%d rejected (%s) %s", path, rej.row, rej.reason, rej.detail)
    return qf


def _generation_seed(quote_path: Path) -> int | None:
    side = quote_path.with_suffix(".provenance")
    if side.exists():
        value = read_keyvalues(side).get("seed")
        return int(value) if value is not None else None
    return None


def _reprice_sim(args, cfg: ExperimentConfig, quotes) -> SimConfig | None:
    if getattr(args, "no_reprice", False):
        return None
    seed = getattr(args, "reprice_seed", None)
    if seed is None:
        seed = _generation_seed(args.quotes) if args.quotes else None
    if seed is None:
        seed = cfg.sim.seed
    horizon = max(q.maturity for q in quotes)
    n_paths = getattr(args, "reprice_paths", None) or cfg.sim.n_paths
    return dataclasses.replace(cfg.sim, n_paths=n_paths, seed=seed,
                               horizon=max(horizon, cfg.sim.dt))


def _reference(args, cfg: ExperimentConfig, frame: MarketFrame) -> ExactReference | None:
    if args.reference != "exact":
        return None
    sim = dataclasses.replace(cfg.sim, seed=cfg.sim.seed + 1,
                              horizon=max(cfg.sim.horizon, cfg.eval_grid.t_hi))
    log.info("building exact reference on %dx%d grid", cfg.eval_grid.n_t, cfg.eval_grid.n_k)
    return ExactReference.build(cfg.eval_grid, frame, sim)


def _progress_factory(stride: int):
    if stride <= 0:
        return None

    def factory(lam, seed):
        start = time.perf_counter()

        def progress(iteration, parts):
            if iteration % stride == 0:
                rate = (time.perf_counter() - start) / max(iteration, 1)
                print(f"[lambda={lam:g} seed={seed}] iter {iteration} total={parts.total:.6g} "
                      f"fit={parts.fit:.4g} ini={parts.ini:.4g} arb={parts.arb:.4g} "
                      f"dup={parts.dup:.4g} ({rate:.3f}s/it)", file=sys.stderr, flush=True)
        return progress
    return factory


def cmd_generate(args) -> int:
    cfg = _experiment(args)
    _require_spot(cfg)
    frame = MarketFrame(cfg.spot, cfg.rate, cfg.k_max or cfg.grid.k_hi, cfg.t_max or cfg.grid.t_hi, cfg.kind)
    if args.vol == "exact":
        vol = exact_field(frame)
    elif args.vol.startswith("constant:"):
        vol = constant_field(float(args.vol.split(":", 1)[1]))
    else:
        raise UsageError(f"unknown --vol {args.vol!r}")
    sim = cfg.sim
    if sim.horizon < cfg.grid.t_hi:
        sim = dataclasses.replace(sim, horizon=cfg.grid.t_hi)
    ds = generate_synthetic_dataset(cfg.grid, vol, frame, sim)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_quotes(args.out, ds.quotes)
    write_provenance(args.out, ds.provenance, ds.stderrs)
    log.info("wrote %d quotes to %s", len(ds.quotes), args.out)
    return EXIT_OK


def _calibration(args, lambdas) -> int:
    cfg = _experiment(args)
    qf = _load_quotes(args.quotes, cfg)
    frame = cfg.frame_for(qf.quotes)
    out = args.out or cfg.output
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    reference = _reference(args, cfg, frame)
    report = ablation(qf.quotes, frame, cfg.train, lambdas, args.repeats,
                      _reprice_sim(args, cfg, qf.quotes), reference,
                      dataset=args.quotes.stem, out_dir=out,
                      progress_factory=_progress_factory(args.progress))
    write_keyvalues(Path(out) / "provenance.txt",
                    {"quotes": str(args.quotes), "config_hash": cfg.train.digest(),
                     "lambdas": ",".join(f"{x:g}" for x in lambdas), "repeats": args.repeats,
                     "reference": args.reference, "threads": args.threads,
                     **{f"frame.{k}": v for k, v in frame.as_dict().items()},
                     **{f"train.{k}": v for k, v in cfg.train.as_dict().items()},
                     **{f"sim.{k}": v for k, v in cfg.sim.as_dict().items()}})
    for row in report.rows():
        log.info("lambda=%g: price %.4g vol %.4g reprice %.4g", row["lambda_dup"],
                 row["price_rmse_mean"], row["vol_rmse_mean"], row["reprice_rmse_mean"])
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg_lambda = args.lambda_dup
    if cfg_lambda is None:
        cfg_lambda = _experiment(args).train.lambda_dup
    return _calibration(args, [cfg_lambda])


def cmd_ablate(args) -> int:
    try:
        lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --lambdas {args.lambdas!r}") from None
    if not lambdas:
        raise UsageError("--lambdas must list at least one value")
    if any(x < 0 for x in lambdas):
        raise UsageError("lambdas must be non-negative")
    return _calibration(args, lambdas)


def _checkpoint_frame(args, cfg: ExperimentConfig, ckpt, quotes):
    """Frame requested on the command line, checked against the checkpoint's."""
    if cfg.spot is None:
        return ckpt.frame
    frame = cfg.frame_for(quotes) if quotes else MarketFrame(
        cfg.spot, cfg.rate, cfg.k_max or ckpt.frame.k_max, cfg.t_max or ckpt.frame.t_max, cfg.kind)
    if frame != ckpt.frame:
        from .errors import ConfigMismatch
        raise ConfigMismatch(f"checkpoint frame {ckpt.frame} differs from requested {frame}")
    return frame


def cmd_evaluate(args) -> int:
    cfg = _experiment(args)
    ckpt = load_checkpoint(args.checkpoint)
    quotes = []
    if args.quotes:
        quotes = read_quotes(args.quotes, cfg.spot if cfg.spot is not None else ckpt.frame.spot,
                             ckpt.frame.kind).quotes
    frame = _checkpoint_frame(args, cfg, ckpt, quotes)
    reference = _reference(args, cfg, frame)
    if reference is None and not quotes:
        raise UsageError("evaluate needs --reference exact or --quotes")
    reprice_sim = _reprice_sim(args, cfg, quotes) if quotes else None
    ev = evaluate(ckpt.price_model, ckpt.vol_model, quotes, frame, reprice_sim, reference)
    run = RunResult(args.checkpoint.stem, ckpt.config.lambda_dup, ckpt.config.seed,
                    ev.price_rmse, ev.vol_rmse, ev.reprice_rmse, ckpt.state.iteration)
    write_report(CalibrationReport([run], ckpt.config.digest()), args.out)
    log.info("price %.4g vol %.4g reprice %.4g", ev.price_rmse, ev.vol_rmse, ev.reprice_rmse)
    return EXIT_OK


def cmd_reprice(args) -> int:
    cfg = _experiment(args)
    ckpt = load_checkpoint(args.checkpoint)
    spot = cfg.spot if cfg.spot is not None else ckpt.frame.spot
    quotes = read_quotes(args.quotes, spot, cfg.kind if cfg.spot is not None else ckpt.frame.kind).quotes
    frame = _checkpoint_frame(args, cfg, ckpt, quotes)
    sim = _reprice_sim(args, cfg, quotes)
    res = reprice(calibrated_field(ckpt.vol_model, frame), quotes, frame, sim)
    with open(args.out, "w") as fh:
        fh.write(FORMAT_LINE + "\n")
        fh.write("strike,maturity,quote,reprice,stderr\n")
        for q, p, e in zip(quotes, res.prices, res.stderrs):
            fh.write(f"{q.strike!r},{q.maturity!r},{q.price!r},{float(p)!r},{float(e)!r}\n")
        fh.write(f"# rmse={res.rmse!r} clamped={res.clamped}\n")
    log.info("reprice RMSE %.6g over %d quotes", res.rmse, len(quotes))
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = _experiment(args)
    grid = GridSpec.parse(args.grid, args.k_range, args.t_range)
    if args.surface == "exact-vol":
        _require_spot(cfg)
        frame = MarketFrame(cfg.spot, cfg.rate, cfg.k_max or grid.k_hi, cfg.t_max or grid.t_hi, cfg.kind)
        source = exact_field(frame)
    else:
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required for price/vol surfaces")
        ckpt = load_checkpoint(args.checkpoint)
        frame = _checkpoint_frame(args, cfg, ckpt, [])
        source = ckpt.price_model if args.surface == "price" else ckpt.vol_model
    export_surface(source, grid, args.coords, args.out, frame)
    log.info("wrote %s surface to %s", args.surface, args.out)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "calibrate": cmd_calibrate, "ablate": cmd_ablate,
            "evaluate": cmd_evaluate, "reprice": cmd_reprice, "export": cmd_export}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (DivergedTraining, VolFieldFailure, NonFiniteGradient, NonFiniteParams) as exc:
        print(f"volcal: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (VolcalError, InvalidInput, OSError, ValueError) as exc:
        print(f"volcal: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())


def main_entry() -> None:
    sys.exit(main())
