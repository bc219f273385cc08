"""Alternating optimisation of the price and volatility networks.

Each iteration draws one collocation batch, evaluates the four losses once,
steps the price network on the combined loss and the volatility network on
the Dupire loss alone.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .core import MarketFrame, ScaledQuote, balance_weights
from .errors import ConfigMismatch, DivergedTraining, VersionMismatch
from .formats import FORMAT_LINE, read_container, stable_hash, write_container
from .losses import (
    CollocationBatch,
    LossBreakdown,
    arbitrage_terms,
    dupire_terms,
    loss_ini,
    quote_tensors,
    sample_batch,
    total_loss,
)
from .nets import (
    NetConfig,
    NetParams,
    PriceSurfaceModel,
    VolSurfaceModel,
    eta_eval,
    init_params,
    params_from_header,
    params_header,
    price_jet,
    price_value,
)

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    m1: int = 128
    m2: int = 128 * 128
    lambda_ini: float = 1.0
    lambda_arb: float = 1.0
    lambda_dup: float = 1.0
    max_iters: int = 30000
    lr0: float = 1e-3
    lr_decay: float = 1.1
    lr_interval: int = 2000
    seed: int = 0
    checkpoint_every: int = 1000
    net: NetConfig = field(default_factory=NetConfig)
    dtype: str = "float32"
    early_stop: bool = True
    early_stop_window: int = 2000
    early_stop_tol: float = 1e-8
    chunk_size: int | None = None
    trace_stride: int = 1
    # Literal reading of the lambda_dup = 0 ablation: leave the vol net untouched.
    freeze_vol_when_unregularized: bool = False

    def __post_init__(self):
        if isinstance(self.net, dict):
            object.__setattr__(self, "net", NetConfig(**self.net))
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.m1 < 1 or self.m2 < 1 or self.max_iters < 0:
            raise ValueError("m1, m2 must be >= 1 and max_iters >= 0")
        if min(self.lambda_ini, self.lambda_arb, self.lambda_dup) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr0 <= 0 or self.lr_decay <= 0 or self.lr_interval < 1:
            raise ValueError("invalid learning-rate schedule")
        if self.checkpoint_every < 1 or self.trace_stride < 1:
            raise ValueError("checkpoint_every and trace_stride must be >= 1")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @property
    def updates_vol(self) -> bool:
        return not (self.freeze_vol_when_unregularized and self.lambda_dup == 0)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["net"] = self.net.as_dict()
        return out

    def digest(self) -> str:
        return stable_hash(self.as_dict())


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Step-decayed learning rate ``lr0 / decay**floor(iter / interval)``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.lr0 / config.lr_decay ** (iteration // config.lr_interval)


@dataclass
class AdamState:
    step: int
    m: torch.Tensor
    v: torch.Tensor

    @classmethod
    def zeros_like(cls, flat: torch.Tensor) -> "AdamState":
        return cls(0, torch.zeros_like(flat), torch.zeros_like(flat))


def optimizer_step(flat: torch.Tensor, grad: torch.Tensor, state: AdamState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> tuple[torch.Tensor, AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    if flat.shape != grad.shape:
        raise ValueError("parameter and gradient shapes differ")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    new = flat - lr * m_hat / (torch.sqrt(v_hat) + eps)
    return new, AdamState(step, m, v)


TRACE_COLUMNS = ("iter", "lr", "fit", "ini", "arb", "dup", "total")


@dataclass
class TrainTrace:
    iters: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    fit: list[float] = field(default_factory=list)
    ini: list[float] = field(default_factory=list)
    arb: list[float] = field(default_factory=list)
    dup: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    wall: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.iters)

    def record(self, iteration: int, lr: float, parts: LossBreakdown, wall: float) -> None:
        self.iters.append(iteration)
        self.lr.append(lr)
        for name in ("fit", "ini", "arb", "dup", "total"):
            getattr(self, name).append(getattr(parts, name))
        self.wall.append(wall)

    def breakdown(self, i: int) -> LossBreakdown:
        return LossBreakdown(self.fit[i], self.ini[i], self.arb[i], self.dup[i], self.total[i])

    def to_arrays(self) -> dict[str, np.ndarray]:
        # wall-clock times stay in memory so persisted artifacts are reproducible
        return {f"trace.{c}": np.asarray(getattr(self, c if c != "iter" else "iters"), dtype=np.float64)
                for c in TRACE_COLUMNS}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "TrainTrace":
        trace = cls()
        trace.iters = [int(i) for i in arrays["trace.iter"]]
        for c in TRACE_COLUMNS[1:]:
            setattr(trace, c, [float(x) for x in arrays[f"trace.{c}"]])
        trace.wall = [math.nan] * len(trace.iters)
        return trace

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(FORMAT_LINE + "\n")
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for i in range(len(self)):
                writer.writerow([self.iters[i]] + [repr(getattr(self, c)[i]) for c in TRACE_COLUMNS[1:]])


@dataclass
class TrainState:
    price: NetParams
    vol: NetParams
    price_opt: AdamState
    vol_opt: AdamState
    iteration: int
    rng: np.random.Generator
    lr_scale: float = 1.0
    rollbacks: int = 0
    recent_totals: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def clone(self) -> "TrainState":
        return copy.deepcopy(self)


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    def conv(x):
        if isinstance(x, np.ndarray):
            return {"__array__": x.tolist(), "dtype": str(x.dtype)}
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.integer):
            return int(x)
        return x
    return conv(rng.bit_generator.state)


def _rng_from_json(state: dict) -> np.random.Generator:
    def conv(x):
        if isinstance(x, dict) and "__array__" in x:
            return np.array(x["__array__"], dtype=x["dtype"])
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x
    state = conv(state)
    bit_gen = getattr(np.random, state["bit_generator"])()
    bit_gen.state = state
    return np.random.Generator(bit_gen)


def initial_state(config: TrainConfig) -> TrainState:
    dtype = config.torch_dtype
    # independent seeds for the two nets and the sampler
    seeds = np.random.SeedSequence(config.seed).generate_state(3, dtype=np.uint64)
    price = init_params(config.net, int(seeds[0]), dtype)
    vol = init_params(config.net, int(seeds[1]), dtype)
    rng = np.random.Generator(np.random.Philox(int(seeds[2])))
    return TrainState(price, vol, AdamState.zeros_like(price.flat), AdamState.zeros_like(vol.flat), 0, rng)


class Trainer:
    """Stateful driver around one calibration run."""

    def __init__(self, quotes: Sequence[ScaledQuote], frame: MarketFrame, config: TrainConfig,
                 state: TrainState | None = None, trace: TrainTrace | None = None):
        if not quotes:
            raise ValueError("no quotes to calibrate on")
        self.frame = frame
        self.config = config
        self.state = state if state is not None else initial_state(config)
        self.trace = trace if trace is not None else TrainTrace()
        dtype = config.torch_dtype
        self._price, self._k, self._t = quote_tensors(quotes, dtype)
        self._fit_w = torch.from_numpy(balance_weights(self._price.numpy())).to(dtype)
        self._snapshot = (self.state.clone(), len(self.trace))

    @property
    def price_model(self) -> PriceSurfaceModel:
        return PriceSurfaceModel(self.state.price, self.frame)

    @property
    def vol_model(self) -> VolSurfaceModel:
        return VolSurfaceModel(self.state.vol, self.frame)

    def done(self) -> bool:
        return self.state.iteration >= self.config.max_iters or self.state.stopped_early

    def _losses(self, pm: PriceSurfaceModel, vm: VolSurfaceModel, batch: CollocationBatch,
                need_vol_grad: bool):
        cfg = self.config
        err = price_value(pm, self._k, self._t) - self._price
        fit = torch.mean(self._fit_w * err * err)
        ini = loss_ini(pm, batch, self.frame)
        m2 = batch.domain_k.shape[0]
        if cfg.chunk_size and cfg.chunk_size < m2:
            return self._chunked(pm, vm, batch, fit, ini, need_vol_grad)
        k, t = batch.domain_k, batch.domain_t
        jet = price_jet(pm, k, t)
        eta = eta_eval(vm, k, t)
        w = torch.from_numpy(balance_weights(jet.d_t.detach().numpy())).to(k.dtype)
        arb = torch.mean(w * arbitrage_terms(jet, k, self.frame))
        dup = torch.mean(w * dupire_terms(jet, eta, k))
        parts = total_loss(fit, ini, arb, dup, cfg.lambda_ini, cfg.lambda_arb, cfg.lambda_dup)
        objective = parts.total if cfg.lambda_dup > 0 else fit + cfg.lambda_ini * ini + cfg.lambda_arb * arb
        grads = [torch.autograd.grad(objective, pm.params.flat, retain_graph=need_vol_grad)[0]]
        if need_vol_grad:
            grads.append(torch.autograd.grad(dup, vm.params.flat)[0])
        return parts, grads

    def _chunked(self, pm, vm, batch, fit, ini, need_vol_grad):
        """Two-pass evaluation: detached weights over the whole batch, then
        per-chunk backward passes accumulated in a fixed order."""
        cfg = self.config
        m2 = batch.domain_k.shape[0]
        with torch.no_grad():
            d_t = torch.cat([price_jet(pm, batch.domain_k[s], batch.domain_t[s]).d_t
                             for s in batch.chunks(cfg.chunk_size)])
        w = torch.from_numpy(balance_weights(d_t.numpy())).to(d_t.dtype)
        head = fit + cfg.lambda_ini * ini
        g_price = torch.autograd.grad(head, pm.params.flat)[0]
        g_vol = torch.zeros_like(vm.params.flat)
        arb_sum = dup_sum = 0.0
        for s in batch.chunks(cfg.chunk_size):
            k, t = batch.domain_k[s], batch.domain_t[s]
            jet = price_jet(pm, k, t)
            eta = eta_eval(vm, k, t)
            arb = torch.sum(w[s] * arbitrage_terms(jet, k, self.frame)) / m2
            dup = torch.sum(w[s] * dupire_terms(jet, eta, k)) / m2
            obj = cfg.lambda_arb * arb + (cfg.lambda_dup * dup if cfg.lambda_dup > 0 else 0.0)
            g_price = g_price + torch.autograd.grad(obj, pm.params.flat, retain_graph=need_vol_grad)[0]
            if need_vol_grad:
                g_vol = g_vol + torch.autograd.grad(dup, vm.params.flat)[0]
            arb_sum += float(arb.detach())
            dup_sum += float(dup.detach())
        parts = total_loss(float(fit.detach()), float(ini.detach()), arb_sum, dup_sum,
                           cfg.lambda_ini, cfg.lambda_arb, cfg.lambda_dup)
        return parts, [g_price, g_vol] if need_vol_grad else [g_price]

    def step(self) -> LossBreakdown:
        cfg, st = self.config, self.state
        t0 = time.perf_counter()
        lr = lr_at(st.iteration, cfg) * st.lr_scale
        batch = sample_batch(cfg.m1, cfg.m2, st.rng, cfg.torch_dtype)
        price_flat = st.price.flat.detach().requires_grad_(True)
        vol_flat = st.vol.flat.detach().requires_grad_(True)
        pm = PriceSurfaceModel(st.price.with_flat(price_flat), self.frame)
        vm = VolSurfaceModel(st.vol.with_flat(vol_flat), self.frame)
        update_vol = cfg.updates_vol
        parts, grads = self._losses(pm, vm, batch, update_vol)
        parts = parts.as_floats()
        finite = all(math.isfinite(v) for v in (parts.fit, parts.ini, parts.arb, parts.dup, parts.total))
        finite = finite and all(bool(torch.isfinite(g).all()) for g in grads)
        if not finite:
            self._rollback()
            return parts
        new_price, st.price_opt = optimizer_step(st.price.flat, grads[0], st.price_opt, lr)
        st.price = st.price.with_flat(new_price.detach())
        if update_vol:
            new_vol, st.vol_opt = optimizer_step(st.vol.flat, grads[1], st.vol_opt, lr)
            st.vol = st.vol.with_flat(new_vol.detach())
        if st.iteration % cfg.trace_stride == 0:
            self.trace.record(st.iteration, lr, parts, time.perf_counter() - t0)
        st.iteration += 1
        self._track_convergence(parts.total)
        if st.iteration % cfg.checkpoint_every == 0:
            self._snapshot = (st.clone(), len(self.trace))
        return parts

    def _rollback(self) -> None:
        st = self.state
        if st.rollbacks >= 1:
            raise DivergedTraining(f"non-finite loss at iteration {st.iteration} after rollback",
                                   st.iteration)
        snap, trace_len = self._snapshot
        log.warning("non-finite loss at iteration %d; rolling back to %d and halving lr",
                    st.iteration, snap.iteration)
        self.state = snap.clone()
        self.state.lr_scale *= 0.5
        self.state.rollbacks += 1
        for name in ("iters", "lr", "fit", "ini", "arb", "dup", "total", "wall"):
            del getattr(self.trace, name)[trace_len:]

    def _track_convergence(self, total: float) -> None:
        cfg, st = self.config, self.state
        if not cfg.early_stop:
            return
        window = cfg.early_stop_window
        st.recent_totals.append(total)
        if len(st.recent_totals) > 2 * window:
            del st.recent_totals[0]
        if len(st.recent_totals) == 2 * window and st.iteration % window == 0:
            previous = sum(st.recent_totals[:window]) / window
            current = sum(st.recent_totals[window:]) / window
            if abs(previous - current) < cfg.early_stop_tol * abs(previous):
                log.info("early stop at iteration %d", st.iteration)
                st.stopped_early = True

    def run(self, iterations: int | None = None,
            progress: Callable[[int, LossBreakdown], None] | None = None,
            checkpoint_path: str | os.PathLike | None = None) -> "Trainer":
        target = self.config.max_iters
        if iterations is not None:
            target = min(target, self.state.iteration + iterations)
        while self.state.iteration < target and not self.state.stopped_early:
            parts = self.step()
            if progress is not None:
                progress(self.state.iteration, parts)
            if checkpoint_path is not None and self.state.iteration % self.config.checkpoint_every == 0:
                self.save(checkpoint_path)
        return self

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, self)


def train(quotes: Sequence[ScaledQuote], frame: MarketFrame, config: TrainConfig,
          progress: Callable[[int, LossBreakdown], None] | None = None,
          checkpoint_path: str | os.PathLike | None = None,
          ) -> tuple[PriceSurfaceModel, VolSurfaceModel, TrainTrace]:
    trainer = Trainer(quotes, frame, config).run(progress=progress, checkpoint_path=checkpoint_path)
    return trainer.price_model, trainer.vol_model, trainer.trace


def save_checkpoint(path: str | os.PathLike, trainer: Trainer) -> None:
    st = trainer.state
    header = {
        "kind": "checkpoint",
        "iteration": st.iteration,
        "lr_scale": st.lr_scale,
        "rollbacks": st.rollbacks,
        "stopped_early": st.stopped_early,
        "rng": _rng_state_to_json(st.rng),
        "price_step": st.price_opt.step,
        "vol_step": st.vol_opt.step,
        "price_params": params_header(st.price),
        "vol_params": params_header(st.vol),
        "frame": trainer.frame.as_dict(),
        "config": trainer.config.as_dict(),
        "config_hash": trainer.config.digest(),
    }
    arrays = {
        "price": st.price.flat.numpy(),
        "vol": st.vol.flat.numpy(),
        "price_m": st.price_opt.m.numpy(),
        "price_v": st.price_opt.v.numpy(),
        "vol_m": st.vol_opt.m.numpy(),
        "vol_v": st.vol_opt.v.numpy(),
        "recent_totals": np.asarray(st.recent_totals, dtype=np.float64),
        **trainer.trace.to_arrays(),
    }
    write_container(path, header, arrays)


@dataclass
class Checkpoint:
    state: TrainState
    trace: TrainTrace
    frame: MarketFrame
    config: TrainConfig

    @property
    def price_model(self) -> PriceSurfaceModel:
        return PriceSurfaceModel(self.state.price, self.frame)

    @property
    def vol_model(self) -> VolSurfaceModel:
        return VolSurfaceModel(self.state.vol, self.frame)

    def trainer(self, quotes: Sequence[ScaledQuote], config: TrainConfig | None = None) -> Trainer:
        """Resume training; ``config`` may extend ``max_iters`` but not change the nets."""
        config = config or self.config
        if config.net != self.config.net or config.dtype != self.config.dtype:
            raise VersionMismatch("cannot resume with a different network config or dtype")
        return Trainer(quotes, self.frame, config, self.state.clone(), copy.deepcopy(self.trace))


def load_checkpoint(path: str | os.PathLike, net: NetConfig | None = None,
                    frame: MarketFrame | None = None) -> Checkpoint:
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint":
        raise VersionMismatch(f"{path}: not a checkpoint")
    try:
        cfg = dict(header["config"])
        cfg["net"] = NetConfig(**cfg["net"])
        config = TrainConfig(**cfg)
        saved_frame = MarketFrame(**header["frame"])
        price = params_from_header(header["price_params"], arrays["price"])
        vol = params_from_header(header["vol_params"], arrays["vol"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VersionMismatch(f"{path}: corrupt checkpoint ({exc})") from None
    if config.digest() != header.get("config_hash"):
        raise VersionMismatch(f"{path}: config hash mismatch")
    if net is not None and net != config.net:
        raise VersionMismatch(f"{path}: network config {config.net} != requested {net}")
    if frame is not None and frame != saved_frame:
        raise ConfigMismatch(f"{path}: trained on {saved_frame}, requested {frame}")
    state = TrainState(
        price=price, vol=vol,
        price_opt=AdamState(header["price_step"], torch.from_numpy(arrays["price_m"]),
                            torch.from_numpy(arrays["price_v"])),
        vol_opt=AdamState(header["vol_step"], torch.from_numpy(arrays["vol_m"]),
                          torch.from_numpy(arrays["vol_v"])),
        iteration=header["iteration"],
        rng=_rng_from_json(header["rng"]),
        lr_scale=header["lr_scale"],
        rollbacks=header["rollbacks"],
        recent_totals=[float(x) for x in arrays["recent_totals"]],
        stopped_early=header["stopped_early"],
    )
    return Checkpoint(state, TrainTrace.from_arrays(arrays), saved_frame, config)
