"""Acceptance suite: one PASS/FAIL/SKIP line per criterion.

Criteria 3-7 and the reduced ablation smoke profile run by default.  The
full-budget ablations (criteria 1 and 2, many CPU-hours) run only with
``VOLCAL_FULL_ACCEPTANCE=1``.  Run as ``pytest tests/test_acceptance.py -v``
or directly with ``python3 tests/test_acceptance.py``.
"""

import math
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from verdicts import record  # noqa: E402
from volcal import cli  # noqa: E402
from volcal.core import (  # noqa: E402
    MarketFrame,
    OptionKind,
    SurfaceJet,
    balance_weights,
    classical_dupire_sigma,
    dupire_residual,
    eta_from_sigma,
)
from volcal.dataio import read_report  # noqa: E402
from volcal.montecarlo import SimConfig, bs_closed_form, bs_scaled_jet, constant_field, mc_price, simulate_paths  # noqa: E402
from volcal.nets import (  # noqa: E402
    NetConfig,
    PriceSurfaceModel,
    VolSurfaceModel,
    eta_eval,
    param_gradient,
    price_jet,
    price_value,
)

FULL = os.environ.get("VOLCAL_FULL_ACCEPTANCE") == "1"
# collocation batch of the smoke profile; the full profile uses the default 128^2
SMOKE_M2 = int(os.environ.get("VOLCAL_SMOKE_M2", "2048"))

S0, RATE = 1000.0, 0.04
MARKET = ["--s0", S0, "--r", RATE]


def _cli(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"volcal {' '.join(map(str, argv))} exited with {code}"


def _generate(out: Path, grid: str) -> Path:
    path = out / f"quotes_{grid}.csv"
    _cli("generate", "--grid", grid, "--k", "500:3000", "--t", "0.3:1.5", *MARKET,
         "--paths", 100_000, "--seed", 7, "--out", path, "--progress", 0)
    return path


def _ablate(quotes: Path, out: Path, repeats: int, max_iters: int, eval_grid: str, extra=()):
    _cli("ablate", "--quotes", quotes, *MARKET, "--lambdas", "0,1", "--repeats", repeats,
         "--max-iters", max_iters, "--reference", "exact", "--eval-grid", eval_grid,
         "--k", "500:3000", "--t", "0.3:1.5", "--paths", 100_000, "--reprice-paths", 100_000,
         "--progress", 500, "--out", out, *extra)
    runs = read_report(out / "report.runs.csv")
    by_lam = {lam: sorted((r for r in runs if float(r["lambda_dup"]) == lam), key=lambda r: int(r["seed"]))
              for lam in (0.0, 1.0)}
    vol = {lam: [float(r["vol_rmse"]) for r in rows] for lam, rows in by_lam.items()}
    rep = {lam: [float(r["reprice_rmse"]) for r in rows] for lam, rows in by_lam.items()}
    return vol, rep


def _fmt(xs):
    return "[" + ", ".join(f"{x:.4f}" for x in xs) + "]"


@pytest.mark.slow
def test_ac1_smoke_profile(tmp_path):
    """Reduced ablation: lambda=1 beats lambda=0 on local vol within 20 minutes."""
    start = time.perf_counter()
    quotes = _generate(tmp_path, "10x20")
    vol, rep = _ablate(quotes, tmp_path / "smoke", repeats=1, max_iters=5000, eval_grid="128x128",
                       extra=("--m2", SMOKE_M2))
    elapsed = time.perf_counter() - start
    ok = all(a < b for a, b in zip(vol[1.0], vol[0.0])) and elapsed <= 20 * 60
    record("AC1 smoke (b)", ok,
           f"vol RMSE lambda=1 {_fmt(vol[1.0])} vs lambda=0 {_fmt(vol[0.0])}; reprice lambda=1 "
           f"{_fmt(rep[1.0])}; M2={SMOKE_M2}, 5000 iters, 128x128, {elapsed / 60:.1f} min (limit 20)")
    assert ok


@pytest.mark.slow
@pytest.mark.skipif(not FULL, reason="set VOLCAL_FULL_ACCEPTANCE=1 (several CPU-hours)")
def test_ac1_full_ablation(tmp_path):
    start = time.perf_counter()
    quotes = _generate(tmp_path, "10x20")
    vol, rep = _ablate(quotes, tmp_path / "full", repeats=3, max_iters=30000, eval_grid="256x256")
    hours = (time.perf_counter() - start) / 3600
    a = statistics.fmean(vol[1.0]) <= 0.05
    b = all(x < y for x, y in zip(vol[1.0], vol[0.0]))
    c = statistics.fmean(rep[1.0]) <= 5.0
    record("AC1a full", a, f"mean vol RMSE lambda=1 {statistics.fmean(vol[1.0]):.4f} (bound 0.05)")
    record("AC1b full", b, f"per repeat lambda=1 {_fmt(vol[1.0])} < lambda=0 {_fmt(vol[0.0])}")
    record("AC1c full", c, f"mean reprice RMSE lambda=1 {statistics.fmean(rep[1.0]):.3f} (bound 5.0); "
                           f"{hours:.2f} CPU-hours (budget 4)")
    assert a and b and c


@pytest.mark.slow
@pytest.mark.skipif(not FULL, reason="set VOLCAL_FULL_ACCEPTANCE=1 (several CPU-hours)")
def test_ac2_scarce_grid(tmp_path):
    quotes = _generate(tmp_path, "3x6")
    vol, _ = _ablate(quotes, tmp_path / "scarce", repeats=3, max_iters=30000, eval_grid="256x256")
    m1, m0 = statistics.fmean(vol[1.0]), statistics.fmean(vol[0.0])
    ok = m1 <= 0.08 and 2 * m1 <= m0
    record("AC2 scarce 3x6", ok, f"mean vol RMSE lambda=1 {m1:.4f} (bound 0.08), lambda=0 {m0:.4f} (need >= 2x)")
    assert ok


def test_ac1_ac2_full_profile_status():
    if FULL:
        pytest.skip("full profile enabled; see the AC1/AC2 full lines")
    record("AC1 full / AC2", None, "full-budget ablations not run; set VOLCAL_FULL_ACCEPTANCE=1")


def test_ac3_dupire_oracle():
    frame0 = MarketFrame(S0, 0.0, 3000.0, 1.5)
    grid = np.linspace(0.0, 1.0, 34)[1:-1]
    k, t = np.meshgrid(grid, grid)
    jet = bs_scaled_jet(k, t, frame0, 0.3)
    worst_res = float(np.max(np.abs(dupire_residual(jet, eta_from_sigma(0.3, frame0.t_max), k))))

    frame = MarketFrame(S0, RATE, 3000.0, 1.5)
    rng = np.random.default_rng(2024)
    worst_sigma = 0.0
    for strike, maturity in zip(rng.uniform(500, 3000, 100), rng.uniform(0.3, 1.5, 100)):
        bs = bs_closed_form(S0, strike, maturity, RATE, 0.3)
        sigma = classical_dupire_sigma(SurfaceJet(bs.price, bs.d_T, bs.d_K, bs.d_KK), strike, frame)
        worst_sigma = max(worst_sigma, abs(sigma - 0.3))
    ok = worst_res < 1e-6 and worst_sigma <= 1e-8
    record("AC3 Dupire oracle", ok, f"max|residual| {worst_res:.2e} on 32x32 (bound 1e-6); "
                                    f"max|sigma-0.3| {worst_sigma:.2e} at 100 points (bound 1e-8)")
    assert ok


def test_ac4_monte_carlo_accuracy():
    start = time.perf_counter()
    frame = MarketFrame(S0, RATE, 3000.0, 1.5)
    rng = np.random.default_rng(4)
    maturities = np.round(rng.uniform(0.3, 1.5, 20), 2)  # on the dt = 0.01 grid
    # standardised log-moneyness within 2.5: deeper nodes have too few exercised paths for a sample SE
    z = rng.uniform(-2.5, 2.5, 20)
    strikes = S0 * np.exp(RATE * maturities + z * 0.3 * np.sqrt(maturities))
    paths = simulate_paths(constant_field(0.3), frame, SimConfig(n_paths=100_000, seed=11), monitor=maturities)
    worst_price = worst_parity = 0.0
    for K, T in zip(strikes, maturities):
        call = mc_price(paths, K, T, frame, OptionKind.CALL)
        put = mc_price(paths, K, T, frame, OptionKind.PUT)
        exact = bs_closed_form(S0, K, T, RATE, 0.3).price
        worst_price = max(worst_price, abs(call.price - exact) / call.stderr)
        parity = S0 - K * math.exp(-RATE * T)
        worst_parity = max(worst_parity, abs(call.price - put.price - parity) / math.hypot(call.stderr, put.stderr))
    elapsed = time.perf_counter() - start
    ok = worst_price < 3 and worst_parity < 3 and elapsed <= 120
    record("AC4 MC accuracy", ok, f"worst |MC-BS| {worst_price:.2f} SE, worst parity gap {worst_parity:.2f} "
                                  f"combined SE (bound 3); {elapsed:.1f}s (limit 120s)")
    assert ok


def test_ac5_differentiation():
    start = time.perf_counter()
    frames = {"call": MarketFrame(S0, RATE, 3000.0, 1.5),
              "put": MarketFrame(S0, RATE, 3000.0, 1.5, OptionKind.PUT)}
    small = NetConfig(blocks=2, width=16)
    rng = np.random.default_rng(55)
    worst_jet = 0.0
    for name, frame in frames.items():
        for i in range(100):
            cfg = NetConfig() if i % 10 == 0 else small
            model = PriceSurfaceModel(oracles.random_params(cfg, int(rng.integers(1 << 30))), frame)
            k, t = rng.uniform(0.05, 0.95, 2)
            jet = price_jet(model, torch.tensor([k], dtype=torch.float64), torch.tensor([t], dtype=torch.float64))
            fd = (oracles.richardson(lambda x: oracles.value_at(model, k, x), t, 1e-4, 1),
                  oracles.richardson(lambda x: oracles.value_at(model, x, t), k, 1e-4, 1),
                  oracles.richardson(lambda x: oracles.value_at(model, x, t), k, 1e-3, 2))
            for got, ref in zip((jet.d_t, jet.d_k, jet.d_kk), fd):
                worst_jet = max(worst_jet, oracles.rel_err(float(got[0]), ref, 1e-3 * S0))

    w8 = NetConfig(blocks=2, width=8)
    k0, t0 = torch.tensor([0.37], dtype=torch.float64), torch.tensor([0.58], dtype=torch.float64)
    worst_value = worst_kk = 0.0
    for name, frame in frames.items():
        for seed in range(3):
            params = oracles.random_params(w8, 100 + seed)
            for entry in ("value", "d_t", "d_k", "d_kk"):
                def loss(q, entry=entry):
                    return getattr(price_jet(PriceSurfaceModel(q, frame), k0, t0), entry).sum()
                err = oracles.max_rel_gradient_err(param_gradient(loss, params), oracles.fd_gradient(loss, params, 1e-6))
                if entry == "d_kk":
                    worst_kk = max(worst_kk, err)
                else:
                    worst_value = max(worst_value, err)
    elapsed = time.perf_counter() - start
    ok = worst_jet < 1e-5 and worst_value < 1e-4 and worst_kk < 1e-3 and elapsed <= 300
    record("AC5 differentiation", ok, f"jet rel err {worst_jet:.1e} (1e-5); grad value {worst_value:.1e} (1e-4), "
                                      f"d_kk {worst_kk:.1e} (1e-3); {elapsed:.1f}s (limit 300s)")
    assert ok


def test_ac6_structural_invariants():
    call = MarketFrame(S0, RATE, 3000.0, 1.5)
    put = MarketFrame(S0, RATE, 3000.0, 1.5, OptionKind.PUT)
    cfg = NetConfig(blocks=2, width=16)
    rng = np.random.default_rng(66)
    edge = bound = eta_min = 0.0
    bounds_ok = True
    for draw in range(1000):
        params = oracles.random_params(cfg, draw, spread=float(rng.uniform(0.1, 4.0)))
        t = torch.from_numpy(rng.random(16))
        k = torch.from_numpy(rng.random(16))
        pc = PriceSurfaceModel(params, call)
        pp = PriceSurfaceModel(params, put)
        edge = max(edge, float(price_value(pc, torch.ones(16, dtype=torch.float64), t).abs().max()),
                   float(price_value(pp, torch.zeros(16, dtype=torch.float64), t).abs().max()))
        v = price_value(pc, k, t)
        bounds_ok &= bool(((v >= 0) & (v <= S0)).all())
        eta_min = min(eta_min, float(eta_eval(VolSurfaceModel(params, call), k, t).min()))
    worst_mean = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        values = rng.normal(0, 10 ** rng.uniform(-3, 3), n)
        values[rng.random(n) < 0.2] = 0.0
        worst_mean = max(worst_mean, abs(float(balance_weights(values).mean()) - 2.0))
    ok = edge <= 1e-12 and bounds_ok and eta_min >= 0.0 and worst_mean <= 1e-12
    record("AC6 structural", ok, f"max boundary value {edge:.1e}; call bounds {'held' if bounds_ok else 'violated'}; "
                                 f"min eta {eta_min:.2e}; max |mean(w)-2| {worst_mean:.1e} (1000 draws each)")
    assert ok


def test_ac7_determinism(tmp_path):
    quotes = tmp_path / "q.csv"
    _cli("generate", "--grid", "10x20", *MARKET, "--paths", 20_000, "--seed", 3, "--out", quotes)
    budget = ["--max-iters", 1000, "--m2", 16384] if FULL else ["--max-iters", 300, "--m2", 1024]
    for name in ("a", "b"):
        _cli("calibrate", "--quotes", quotes, *MARKET, *budget, "--seed", 0, "--threads", 1,
             "--reference", "exact", "--eval-grid", "32x32", "--paths", 20_000, "--reprice-paths", 20_000,
             "--checkpoint-every", 100, "--progress", 0, "--out", tmp_path / name)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    ok = bool(names) and all(same) and names == sorted(p.name for p in (tmp_path / "b").iterdir())
    record("AC7 determinism", ok, f"{sum(same)}/{len(names)} artifacts bitwise identical ({', '.join(names)})")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
