"""Calibrate-then-evaluate workflows shared by the CLI and the acceptance suite."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core import MarketFrame, OptionQuote, scale_coordinates, scale_quotes
from .dataio import CalibrationReport, RunResult, write_report
from .losses import LossBreakdown
from .montecarlo import (
    GridSpec,
    SimConfig,
    exact_field,
    exact_vol_grid,
    mc_price_grid,
    model_price_grid,
    model_vol_grid,
    calibrated_field,
    reprice,
    simulate_paths,
    snapped_maturities,
    surface_rmse,
)
from .nets import PriceSurfaceModel, VolSurfaceModel, price_value
from .trainer import Trainer, TrainConfig

log = logging.getLogger(__name__)


@dataclass
class ExactReference:
    """Ground truth for synthetic runs: the exact vol field and MC prices on the test grid.

    Price references sit at maturities snapped to the simulation step; the
    model is compared at the same snapped maturities.
    """

    grid: GridSpec
    strikes: np.ndarray
    maturities: np.ndarray
    sigma: np.ndarray
    prices: np.ndarray

    @classmethod
    def build(cls, grid: GridSpec, frame: MarketFrame, sim: SimConfig) -> "ExactReference":
        strikes = grid.strikes
        vol_maturities = grid.maturities
        price_maturities = snapped_maturities(vol_maturities, sim.dt)
        paths = simulate_paths(exact_field(frame), frame, sim, monitor=np.unique(price_maturities))
        prices = mc_price_grid(paths, strikes, price_maturities, frame)
        return cls(grid, strikes, price_maturities,
                   exact_vol_grid(strikes, vol_maturities, frame), prices)

    def vol_rmse(self, vol_model: VolSurfaceModel) -> float:
        return surface_rmse(model_vol_grid(vol_model, self.strikes, self.grid.maturities), self.sigma)

    def price_rmse(self, price_model: PriceSurfaceModel) -> float:
        return surface_rmse(model_price_grid(price_model, self.strikes, self.maturities), self.prices)


def quote_fit_rmse(price_model: PriceSurfaceModel, quotes: Sequence[OptionQuote]) -> float:
    k, t = scale_coordinates(np.array([q.strike for q in quotes]),
                             np.array([q.maturity for q in quotes]), price_model.frame)
    with torch.no_grad():
        model = price_value(price_model, torch.from_numpy(k), torch.from_numpy(t)).double().numpy()
    return surface_rmse(model, [q.price for q in quotes])


@dataclass
class Evaluation:
    price_rmse: float
    vol_rmse: float
    reprice_rmse: float
    clamped: int = 0


def evaluate(price_model: PriceSurfaceModel, vol_model: VolSurfaceModel, quotes: Sequence[OptionQuote],
             frame: MarketFrame, reprice_sim: SimConfig | None,
             reference: ExactReference | None = None) -> Evaluation:
    """Table-style RMSEs.  Without a reference, price RMSE is measured at the
    quotes and vol RMSE is NaN (not applicable)."""
    if reference is not None:
        price_rmse = reference.price_rmse(price_model)
        vol_rmse = reference.vol_rmse(vol_model)
    else:
        price_rmse = quote_fit_rmse(price_model, quotes)
        vol_rmse = math.nan
    if reprice_sim is not None:
        res = reprice(calibrated_field(vol_model, frame), quotes, frame, reprice_sim)
        reprice_rmse, clamped = res.rmse, res.clamped
    else:
        reprice_rmse, clamped = math.nan, 0
    return Evaluation(price_rmse, vol_rmse, reprice_rmse, clamped)


def calibrate_once(quotes: Sequence[OptionQuote], frame: MarketFrame, config: TrainConfig,
                   progress: Callable[[int, LossBreakdown], None] | None = None,
                   checkpoint_path: str | os.PathLike | None = None) -> Trainer:
    trainer = Trainer(scale_quotes(quotes, frame), frame, config)
    trainer.run(progress=progress, checkpoint_path=checkpoint_path)
    if checkpoint_path is not None:
        trainer.save(checkpoint_path)
    return trainer


def ablation(quotes: Sequence[OptionQuote], frame: MarketFrame, base: TrainConfig,
             lambdas: Sequence[float], repeats: int, reprice_sim: SimConfig | None,
             reference: ExactReference | None = None, dataset: str = "quotes",
             out_dir: str | os.PathLike | None = None,
             progress_factory: Callable[[float, int], Callable] | None = None) -> CalibrationReport:
    """Run every (lambda, repeat) pair; repeat i uses seed ``base.seed + i``."""
    if not lambdas:
        raise ValueError("empty lambda list")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    runs = []
    for lam in lambdas:
        for i in range(repeats):
            cfg = dataclasses.replace(base, lambda_dup=float(lam), seed=base.seed + i)
            tag = f"lambda{lam:g}_seed{cfg.seed}"
            ckpt = out / f"{tag}.ckpt" if out is not None else None
            progress = progress_factory(lam, cfg.seed) if progress_factory else None
            trainer = calibrate_once(quotes, frame, cfg, progress, ckpt)
            if out is not None:
                trainer.trace.write_csv(out / f"{tag}.trace.csv")
            ev = evaluate(trainer.price_model, trainer.vol_model, quotes, frame, reprice_sim, reference)
            log.info("%s %s: price %.4g vol %.4g reprice %.4g", dataset, tag,
                     ev.price_rmse, ev.vol_rmse, ev.reprice_rmse)
            runs.append(RunResult(dataset, float(lam), cfg.seed, ev.price_rmse, ev.vol_rmse,
                                  ev.reprice_rmse, trainer.state.iteration))
    report = CalibrationReport(runs, config_hash=base.digest())
    if out is not None:
        write_report(report, out / "report.csv")
    return report
