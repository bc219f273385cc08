"""Quote ingestion, surface export, reports and experiment configuration."""

from __future__ import annotations

import configparser
import enum
import csv
import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from .core import (
    BOUND_TOL,
    MarketFrame,
    OptionKind,
    OptionQuote,
    _field_problem,
    bound_violation,
    scale_coordinates,
    unscale_coordinates,
    unscale_volatility,
)
from .errors import EmptyAfterValidation, MalformedHeader, ReportSchemaError, VersionMismatch
from .formats import FORMAT_LINE, stable_hash
from .montecarlo import GridSpec, SimConfig, VolatilityField
from .nets import NetConfig, PriceSurfaceModel, VolSurfaceModel, eta_eval, price_value
from .trainer import TrainConfig

QUOTE_HEADER = ("price", "strike", "maturity")
OPTIONAL_COLUMNS = ("bid", "ask")


@dataclass
class Rejection:
    row: int  # 1-based line number in the file
    reason: str
    detail: str = ""


@dataclass
class QuoteFile:
    path: Path
    quotes: list[OptionQuote]
    rejected: list[Rejection] = field(default_factory=list)


def _data_lines(path: Path) -> Iterable[tuple[int, str]]:
    with open(path, newline="", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                if line.startswith("# volcal-format") and line.rstrip() != FORMAT_LINE:
                    raise VersionMismatch(f"{path}: unsupported {line.strip()!r}")
                continue
            if line.strip():
                yield lineno, line


def read_quotes(path: str | os.PathLike, spot: float, kind: OptionKind | str = OptionKind.CALL,
                tol: float = BOUND_TOL) -> QuoteFile:
    """Parse ``price,strike,maturity`` rows; bad rows are logged, never fatal.

    Optional ``bid,ask`` columns are accepted and ignored.
    """
    path = Path(path)
    kind = OptionKind.parse(kind)
    # bounds only need spot and kind
    probe = MarketFrame(spot=spot, rate=0.0, k_max=1.0, t_max=1.0, kind=kind)
    lines = _data_lines(path)
    try:
        _, header_line = next(lines)
    except StopIteration:
        raise MalformedHeader(f"{path}: empty file") from None
    header = [h.strip().lower() for h in next(csv.reader([header_line]))]
    if tuple(header[:3]) != QUOTE_HEADER or any(h not in OPTIONAL_COLUMNS for h in header[3:]):
        raise MalformedHeader(f"{path}: expected header 'price,strike,maturity[,bid,ask]', got {header}")
    quotes, rejected = [], []
    for lineno, line in lines:
        try:
            cells = next(csv.reader([line]))
        except csv.Error as exc:
            rejected.append(Rejection(lineno, "MalformedRow", str(exc)))
            continue
        if len(cells) != len(header):
            rejected.append(Rejection(lineno, "MalformedRow", f"{len(cells)} fields, expected {len(header)}"))
            continue
        try:
            price, strike, maturity = (float(c) for c in cells[:3])
        except ValueError:
            rejected.append(Rejection(lineno, "MalformedRow", "non-numeric field"))
            continue
        problem = _field_problem(price, strike, maturity)
        if problem:
            rejected.append(Rejection(lineno, "InvalidField", problem))
            continue
        quote = OptionQuote(price, strike, maturity)
        problem = bound_violation(quote, probe, tol)
        if problem:
            rejected.append(Rejection(lineno, "BoundViolation", problem))
            continue
        quotes.append(quote)
    if not quotes:
        raise EmptyAfterValidation(f"{path}: no valid quotes ({len(rejected)} rejected)")
    return QuoteFile(path, quotes, rejected)


def write_quotes(path: str | os.PathLike, quotes: Sequence[OptionQuote]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(FORMAT_LINE + "\n")
        writer = csv.writer(fh)
        writer.writerow(QUOTE_HEADER)
        for q in quotes:
            writer.writerow([repr(q.price), repr(q.strike), repr(q.maturity)])


def write_keyvalues(path: str | os.PathLike, values: dict[str, Any]) -> None:
    with open(path, "w") as fh:
        fh.write(FORMAT_LINE + "\n")
        for key in sorted(values):
            fh.write(f"{key} = {values[key]}\n")


def read_keyvalues(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or "=" not in line:
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_provenance(quote_path: str | os.PathLike, provenance: dict, stderrs: Sequence[float]) -> Path:
    quote_path = Path(quote_path)
    err_path = quote_path.with_suffix(".stderr.csv")
    with open(err_path, "w", newline="") as fh:
        fh.write(FORMAT_LINE + "\n")
        fh.write("stderr\n")
        for e in stderrs:
            fh.write(f"{e!r}\n")
    side = quote_path.with_suffix(".provenance")
    write_keyvalues(side, {**provenance, "stderr_file": err_path.name})
    return side


class Coordinates(str, enum.Enum):
    ORIGINAL = "original"
    SCALED = "scaled"


@dataclass
class SurfaceGridExport:
    """Values on a (row axis) x (column axis) mesh plus descriptive metadata.

    Rows run over maturity (T or t), columns over strike (K or k).
    """

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != (len(self.rows), len(self.cols)):
            raise ValueError(f"matrix shape {self.values.shape} != axes ({len(self.rows)}, {len(self.cols)})")


def _model_hash(source: Any) -> str:
    params = getattr(source, "params", None)
    if params is None:
        return getattr(source, "tag", "callable")
    return stable_hash(params.flat.detach().double().numpy().tobytes().hex())


def surface_grid(source, grid: GridSpec, coords: Coordinates | str, frame: MarketFrame,
                 n_scaled: tuple[int, int] | None = None) -> SurfaceGridExport:
    """Evaluate a price model, vol model or volatility field on a mesh.

    In original coordinates the mesh is ``grid``'s (T, K) axes.  In scaled
    coordinates it is a uniform (t, k) mesh on the unit square with
    ``n_scaled`` (default: grid's) nodes.  Volatility is always reported as
    annualised sigma.
    """
    coords = Coordinates(coords)
    if coords is Coordinates.ORIGINAL:
        rows, cols = grid.maturities, grid.strikes
        big_k, big_t = np.meshgrid(cols, rows)
        k, t = scale_coordinates(big_k, big_t, frame)
    else:
        n_t, n_k = n_scaled or (grid.n_t, grid.n_k)
        rows, cols = np.linspace(0.0, 1.0, n_t), np.linspace(0.0, 1.0, n_k)
        k, t = np.meshgrid(cols, rows)
        big_k, big_t = unscale_coordinates(k, t, frame)
    if isinstance(source, PriceSurfaceModel):
        with torch.no_grad():
            values = price_value(source, torch.from_numpy(k), torch.from_numpy(t)).double().numpy()
        surface = "price"
    elif isinstance(source, VolSurfaceModel):
        with torch.no_grad():
            eta = eta_eval(source, torch.from_numpy(k), torch.from_numpy(t)).double().numpy()
        values = unscale_volatility(eta, frame)
        surface = "vol"
    elif isinstance(source, VolatilityField):
        values = np.stack([np.asarray(source(big_k[i], float(big_t[i, 0])), dtype=float)
                           for i in range(big_k.shape[0])])
        surface = "vol"
    else:
        raise TypeError(f"cannot export {type(source).__name__}")
    meta = {"surface": surface, "coordinates": coords.value, "source": _model_hash(source),
            "rows": "T" if coords is Coordinates.ORIGINAL else "t",
            "cols": "K" if coords is Coordinates.ORIGINAL else "k",
            **{f"frame.{k_}": v for k_, v in frame.as_dict().items()}}
    return SurfaceGridExport(np.asarray(rows, float), np.asarray(cols, float), np.asarray(values, float), meta)


def write_surface(export: SurfaceGridExport, path: str | os.PathLike) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(FORMAT_LINE + "\n")
        writer = csv.writer(fh)
        corner = f"{export.metadata.get('rows', 'row')}\\{export.metadata.get('cols', 'col')}"
        writer.writerow([corner] + [repr(float(c)) for c in export.cols])
        for r, row in zip(export.rows, export.values):
            writer.writerow([repr(float(r))] + [repr(float(v)) for v in row])
    write_keyvalues(path.with_suffix(".meta"), export.metadata)


def read_surface(path: str | os.PathLike) -> SurfaceGridExport:
    path = Path(path)
    lines = list(_data_lines(path))
    if not lines:
        raise MalformedHeader(f"{path}: empty surface file")
    table = list(csv.reader([line for _, line in lines]))
    cols = np.array([float(c) for c in table[0][1:]])
    rows = np.array([float(r[0]) for r in table[1:]])
    values = np.array([[float(v) for v in r[1:]] for r in table[1:]]).reshape(len(rows), len(cols))
    meta_path = path.with_suffix(".meta")
    meta = read_keyvalues(meta_path) if meta_path.exists() else {}
    return SurfaceGridExport(rows, cols, values, meta)


def export_surface(source, grid: GridSpec, coords: Coordinates | str, path: str | os.PathLike,
                   frame: MarketFrame, n_scaled: tuple[int, int] | None = None) -> SurfaceGridExport:
    export = surface_grid(source, grid, coords, frame, n_scaled)
    write_surface(export, path)
    return export


RMSE_FIELDS = ("price_rmse", "vol_rmse", "reprice_rmse")


@dataclass
class RunResult:
    """RMSEs of one calibration run; NaN marks "not applicable" (e.g. no exact reference)."""

    dataset: str
    lambda_dup: float
    seed: int
    price_rmse: float | None
    vol_rmse: float | None
    reprice_rmse: float | None
    iterations: int = 0


@dataclass
class CalibrationReport:
    runs: list[RunResult]
    config_hash: str = ""
    optimizer: str = "adam(0.9,0.999,1e-8)"

    def rows(self) -> list[dict[str, Any]]:
        """One aggregated row per (dataset, lambda): mean and population spread over runs."""
        groups: dict[tuple[str, float], list[RunResult]] = {}
        for run in self.runs:
            groups.setdefault((run.dataset, run.lambda_dup), []).append(run)
        out = []
        for (dataset, lam), runs in groups.items():
            row: dict[str, Any] = {"dataset": dataset, "lambda_dup": lam, "runs": len(runs),
                                   "seeds": ";".join(str(r.seed) for r in runs)}
            for name in RMSE_FIELDS:
                vals = np.array([getattr(r, name) for r in runs], dtype=float)
                row[f"{name}_mean"] = float(vals.mean())
                row[f"{name}_std"] = float(vals.std())
            row["config_hash"] = self.config_hash
            row["optimizer"] = self.optimizer
            out.append(row)
        return out


REPORT_COLUMNS = ("dataset", "lambda_dup", "runs", "seeds",
                  "price_rmse_mean", "price_rmse_std", "vol_rmse_mean", "vol_rmse_std",
                  "reprice_rmse_mean", "reprice_rmse_std", "config_hash", "optimizer")
RUN_COLUMNS = ("dataset", "lambda_dup", "seed", "iterations") + RMSE_FIELDS


def write_report(report: CalibrationReport, path: str | os.PathLike) -> Path:
    """Write the aggregate CSV and a per-run CSV beside it; returns the per-run path."""
    if not report.runs:
        raise ReportSchemaError("report has no runs")
    for run in report.runs:
        for name in RMSE_FIELDS:
            value = getattr(run, name)
            if value is None or not isinstance(value, (int, float)):
                raise ReportSchemaError(f"run seed={run.seed} lambda={run.lambda_dup}: missing {name}")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(FORMAT_LINE + "\n")
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in report.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    runs_path = path.with_name(path.stem + ".runs.csv")
    with open(runs_path, "w", newline="") as fh:
        fh.write(FORMAT_LINE + "\n")
        writer = csv.DictWriter(fh, fieldnames=RUN_COLUMNS)
        writer.writeheader()
        for run in report.runs:
            writer.writerow({k: (repr(float(v)) if k in RMSE_FIELDS else v)
                             for k, v in dataclasses.asdict(run).items()})
    return runs_path


def read_report(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


@dataclass
class ExperimentConfig:
    """Everything that determines a run, loadable from one INI-style file."""

    spot: float | None = None
    rate: float = 0.0
    kind: OptionKind = OptionKind.CALL
    k_max: float | None = None
    t_max: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    grid: GridSpec = field(default_factory=lambda: GridSpec(10, 20))
    eval_grid: GridSpec = field(default_factory=lambda: GridSpec(256, 256))
    output: Path = Path("out")

    def frame_for(self, quotes: Sequence[OptionQuote]) -> MarketFrame:
        """Market frame; ``k_max``/``t_max`` default to the quote maxima."""
        if self.spot is None:
            raise ValueError("spot is required")
        return MarketFrame(self.spot, self.rate,
                           self.k_max if self.k_max is not None else max(q.strike for q in quotes),
                           self.t_max if self.t_max is not None else max(q.maturity for q in quotes),
                           self.kind)

    def validate(self) -> None:
        if self.grid.t_hi > self.sim.horizon + 1e-12:
            raise ValueError("grid maturities exceed the simulation horizon")


def _coerce(value: str, target):
    if target is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if target in (int, float, str):
        return target(value)
    return value


def _typed_fields(cls) -> dict[str, type]:
    hints = {}
    for f in dataclasses.fields(cls):
        text = str(f.type)
        if "bool" in text:
            hints[f.name] = bool
        elif text.startswith("int"):
            hints[f.name] = int
        elif text.startswith("float"):
            hints[f.name] = float
        else:
            hints[f.name] = str
    return hints


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    cfg = ExperimentConfig()
    if parser.has_section("market"):
        m = parser["market"]
        cfg.spot = m.getfloat("spot", cfg.spot)
        cfg.rate = m.getfloat("rate", cfg.rate)
        cfg.kind = OptionKind.parse(m.get("kind", cfg.kind.value))
        cfg.k_max = m.getfloat("k_max", cfg.k_max)
        cfg.t_max = m.getfloat("t_max", cfg.t_max)
    if parser.has_section("train"):
        kwargs = {}
        types = _typed_fields(TrainConfig)
        net_kw = {}
        for key, value in parser["train"].items():
            if key.startswith("net."):
                name = key[4:]
                net_kw[name] = int(value) if name in ("blocks", "width") else value
            elif key == "chunk_size":
                kwargs[key] = int(value) if value.strip().lower() not in ("", "none") else None
            elif key in types:
                kwargs[key] = _coerce(value, types[key])
            else:
                raise ValueError(f"unknown [train] key {key!r}")
        if net_kw:
            kwargs["net"] = NetConfig(**net_kw)
        cfg.train = TrainConfig(**kwargs)
    if parser.has_section("sim"):
        s = parser["sim"]
        cfg.sim = SimConfig(n_paths=s.getint("n_paths", cfg.sim.n_paths), dt=s.getfloat("dt", cfg.sim.dt),
                            horizon=s.getfloat("horizon", cfg.sim.horizon), seed=s.getint("seed", cfg.sim.seed),
                            scheme=s.get("scheme", cfg.sim.scheme.value))
    if parser.has_section("grid"):
        g = parser["grid"]
        cfg.grid = GridSpec.parse(g.get("shape", "10x20"), g.get("k", None), g.get("t", None))
        if "eval" in g:
            cfg.eval_grid = GridSpec.parse(g["eval"], g.get("k", None), g.get("t", None))
    if parser.has_section("output"):
        cfg.output = Path(parser["output"].get("dir", str(cfg.output)))
    cfg.validate()
    return cfg
