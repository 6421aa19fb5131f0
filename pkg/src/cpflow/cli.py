"""Command-line front end.

Subcommands: ``train``, ``evaluate``, ``sample``, ``invert``,
``density-grid`` and ``ot-experiment``. Settings come from a flat
``key = value`` config file (``#`` starts a comment) and are overridden by
flags. Exit codes: 0 success, 1 usage or configuration error, 2 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .flow import (
    FlowStack,
    InversionError,
    gaussian_ot_reference,
    inverse,
    log_density,
    stack_forward,
)
from .icnn import potential
from . import autodiff as ad
from .solvers import IndefiniteError, NumericalBreakdown, StagnationError
from .training import (
    Checkpoint,
    CheckpointError,
    Dataset,
    DatasetError,
    TrainConfig,
    TrainingAborted,
    build_stack,
    evaluate,
    gaussian_baseline_nll,
    generate_gaussian_ot,
    make_dataset,
    parse_csv_text,
    train,
)

__all__ = ["ConfigError", "load_config", "main", "parse_config_text", "run_ot_experiment", "OTResult"]

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
INVERT_RESIDUAL_MAX = 1e-3

# keys beyond TrainConfig, with defaults
EXTRA_KEYS = {
    "data": "toy:eight_gaussians",
    "out": ".",
    "checkpoint": "",
    "input": "",
    "n": 1000,
    "n_data": 5000,
    "n_val": 5000,
    "dim": 8,
    "has_header": "auto",
    "grid_bounds": "-4,4,-4,4",
    "grid_res": 100,
    "potential": False,
}

OT_DEFAULTS = {
    "n_flows": 1,
    "n_hidden_layers": 5,
    "n_hidden_units": 64,
    "activation_first": "gaussian+offset@gain=1",
    "activation_rest": "gaussian+offset@gain=1",
    "actnorm": False,
    "epochs": 2,
    "learning_rate": 0.03,
    "lr_schedule": "cosine",
    "log_every": 25,
    "val_max": 5000,
    "n_data": 50000,
}


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    out = {f.name: f.default for f in fields(TrainConfig)}
    out.update(EXTRA_KEYS)
    return out


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return None if raw.lower() in ("none", "") else float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; unknown keys are errors."""
    defaults = _defaults()
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value, defaults[key])
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


FLAG_KEYS = {
    "data": "data",
    "out": "out",
    "checkpoint": "checkpoint",
    "input": "input",
    "seed": "seed",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "cg_atol": "cg_atol",
    "grid_bounds": "grid_bounds",
    "grid_res": "grid_res",
    "n": "n",
    "dim": "dim",
    "potential": "potential",
}


def resolve_settings(args, base: dict | None = None) -> dict:
    """Defaults, then ``base``, then the config file, then flags."""
    settings = _defaults()
    settings.update(base or {})
    if args.config:
        settings.update(load_config(args.config))
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            settings[key] = value
    return settings


def train_config(settings: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict({f.name: settings[f.name] for f in fields(TrainConfig)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _has_header(settings: dict) -> bool | None:
    value = str(settings["has_header"]).strip().lower()
    if value == "auto":
        return None
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"has_header must be auto, true or false, got {settings['has_header']!r}")


def _dataset(settings: dict) -> Dataset:
    return make_dataset(
        settings["data"],
        n=settings["n_data"],
        d=settings["dim"],
        seed=settings["seed"],
        has_header=_has_header(settings),
    )


def _load_checkpoint(settings: dict) -> Checkpoint:
    if not settings["checkpoint"]:
        raise ConfigError("a checkpoint is required (--checkpoint PATH)")
    try:
        return Checkpoint.load(settings["checkpoint"])
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from exc


def _out_dir(settings: dict) -> Path:
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def _columns(prefix: str, d: int) -> list[str]:
    return [f"{prefix}{i + 1}" for i in range(d)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(settings: dict) -> int:
    config = train_config(settings)
    dataset = _dataset(settings)
    out = _out_dir(settings)
    ckpt_path = Path(settings["checkpoint"]) if settings["checkpoint"] else out / "checkpoint.bin"
    resume = None
    if ckpt_path.exists():
        resume = Checkpoint.load(ckpt_path)
        if resume.stack.dim != dataset.dim:
            raise ConfigError(f"checkpoint has dimension {resume.stack.dim}, data has {dataset.dim}")
        logger.info("resuming from %s at step %d", ckpt_path, resume.step)
        stack = resume.stack
    else:
        stack = build_stack(config, dataset.dim)
    extra = {"data_loc": dataset.loc.tolist(), "data_scale": dataset.scale.tolist()}
    stack, history, ckpt = train(stack, dataset, config, out_dir=out, resume=resume, extra=extra)
    if ckpt_path != out / "checkpoint.bin":
        ckpt.save(ckpt_path)
    print(f"trained to step {ckpt.step}; history written to {out / 'history.csv'}")
    return EXIT_OK


def cmd_evaluate(settings: dict) -> int:
    ckpt = _load_checkpoint(settings)
    dataset = _dataset(settings)
    split = dataset.test if len(dataset.indices("test")) else dataset.train
    metrics = evaluate(ckpt.stack, split, ckpt.config, dataset)
    metrics["test_nll"] = metrics.pop("val_nll")
    metrics["gaussian_baseline_nll"] = gaussian_baseline_nll(dataset.train, split)
    for k, v in metrics.items():
        print(f"{k} = {v:.6g}")
    out = _out_dir(settings)
    write_csv(out / "metrics.csv", list(metrics), [list(metrics.values())])
    return EXIT_OK


def _to_data_units(ckpt: Checkpoint, x: np.ndarray) -> np.ndarray:
    """Undo the standardization recorded at training time, if any."""
    loc = np.asarray(ckpt.extra.get("data_loc", 0.0), dtype=np.float64)
    scale = np.asarray(ckpt.extra.get("data_scale", 1.0), dtype=np.float64)
    return x * scale + loc


def cmd_sample(settings: dict) -> int:
    ckpt = _load_checkpoint(settings)
    n, d = int(settings["n"]), ckpt.stack.dim
    if n < 0:
        raise ConfigError("n must be non-negative")
    z = np.random.default_rng(settings["seed"]).standard_normal((n, d))
    x = _to_data_units(ckpt, invert_stack(ckpt.stack, z)[0] if n else z)
    out = _out_dir(settings)
    write_csv(out / "samples.csv", _columns("x", d), x)
    print(f"wrote {n} samples to {out / 'samples.csv'}")
    return EXIT_OK


def invert_stack(stack: FlowStack, y, grad_tol: float = 1e-6):
    """Best-effort inverse: failed layers continue from their best iterate.

    Returns ``(x, residual)`` with ``residual = |f(x) - y|_inf`` per row.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    x = y
    for i in reversed(range(len(stack.layers))):
        try:
            x, _ = inverse(stack.layers[i], x, grad_tol=grad_tol)
        except InversionError as exc:
            if exc.x_best is None:
                raise
            logger.warning("layer %d: %s (residual %.3e)", i, exc, exc.residual_inf)
            x = exc.x_best
        if stack.actnorm:
            x = (x - stack.shifts[i]) / stack.scales[i]
    residual = np.max(np.abs(stack_forward(stack, x) - y), axis=1)
    return x, residual


def cmd_invert(settings: dict) -> int:
    ckpt = _load_checkpoint(settings)
    source = settings["input"] or (settings["data"][4:] if settings["data"].startswith("csv:") else "")
    if not source:
        raise ConfigError("invert needs an input CSV (--input PATH or --data csv:PATH)")
    try:
        text = Path(source).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {source}: {exc}") from exc
    y = parse_csv_text(text, has_header=_has_header(settings))
    d = ckpt.stack.dim
    if y.shape[1] != d:
        raise ConfigError(f"input rows have {y.shape[1]} columns, model dimension is {d}")
    x, residual = invert_stack(ckpt.stack, y)
    out = _out_dir(settings)
    x = _to_data_units(ckpt, x)
    write_csv(out / "inverted.csv", _columns("x", d) + ["residual"], np.column_stack([x, residual]))
    bad = np.flatnonzero(residual > INVERT_RESIDUAL_MAX)
    if bad.size:
        print(f"{bad.size} row(s) exceed residual {INVERT_RESIDUAL_MAX:g}: rows {bad[:10].tolist()}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"inverted {len(y)} rows; max residual {residual.max():.3e}")
    return EXIT_OK


def _grid_axes(settings: dict):
    try:
        a, b, c, d = (float(v) for v in str(settings["grid_bounds"]).split(","))
    except ValueError:
        raise ConfigError(f"grid_bounds must be 'x1min,x1max,x2min,x2max', got {settings['grid_bounds']!r}") from None
    res = int(settings["grid_res"])
    if res < 2 or not (a < b and c < d):
        raise ConfigError("grid needs res >= 2 and increasing bounds")
    return np.linspace(a, b, res), np.linspace(c, d, res)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary greyscale PGM (P5, maxval 255); ``image`` rows run top to bottom."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def density_grid(stack: FlowStack, gx: np.ndarray, gy: np.ndarray):
    """Exact log-density on the grid. Returns points ``(ny*nx, 2)`` and ``logp``."""
    if stack.dim != 2:
        raise ConfigError(f"density-grid supports 2-dimensional models only, got d={stack.dim}")
    X1, X2 = np.meshgrid(gx, gy)
    pts = np.column_stack([X1.ravel(), X2.ravel()])
    return pts, log_density(stack, pts, mode="exact").logp


def cmd_density_grid(settings: dict) -> int:
    ckpt = _load_checkpoint(settings)
    stack = ckpt.stack
    gx, gy = _grid_axes(settings)
    pts, logp = density_grid(stack, gx, gy)
    out = _out_dir(settings)
    write_csv(out / "grid.csv", ["x1", "x2", "logp"], np.column_stack([pts, logp]))
    dens = np.exp(logp - logp.max()).reshape(len(gy), len(gx))
    write_pgm(out / "density.pgm", np.rint(255 * dens[::-1]).astype(np.uint8))
    if settings["potential"]:
        h = pts * stack.scales[0] + stack.shifts[0] if stack.actnorm else pts
        layer = stack.layers[0]
        with ad.no_grad():
            F = potential(layer.params, layer.config, ad.constant(h)).value
        write_csv(out / "potential.csv", ["x1", "x2", "F"], np.column_stack([pts, F]))
        write_csv(out / "mesh.csv", ["x1", "x2", "y1", "y2"], np.column_stack([pts, stack_forward(stack, pts)]))
    print(f"wrote {len(pts)} grid points to {out / 'grid.csv'}")
    return EXIT_OK


@dataclass
class OTResult:
    w2_sq: float
    rows: list[dict] = field(default_factory=list)
    spearman_rho: float = math.nan

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)


def run_ot_experiment(settings: dict, out_dir=None) -> OTResult:
    """Fit a flow to a random Gaussian and log KL against transport cost.

    ``n_data`` samples train the flow; ``n_val`` further samples from the
    same Gaussian give the logged diagnostics.
    """
    config = train_config(settings)
    d, n_train, n_val = int(settings["dim"]), int(settings["n_data"]), int(settings["n_val"])
    total = n_train + n_val
    x, mean, cov = generate_gaussian_ot(d, total, seed=settings["seed"])
    dataset = Dataset("gaussian_ot", x, splits=(n_train / total, n_val / total, 0.0), seed=settings["seed"], mean=mean, cov=cov)
    w2_sq, _ = gaussian_ot_reference(mean, cov)
    result = OTResult(w2_sq)
    stack = build_stack(config, d)
    train(stack, dataset, config, out_dir=out_dir, callback=result.rows.append)
    if len(result.rows) > 2:
        kl = result.column("kl_diag")
        gap = np.abs(result.column("transport_cost") - w2_sq)
        result.spearman_rho = float(spearmanr(kl, gap).statistic)
    return result


def cmd_ot_experiment(settings: dict) -> int:
    out = _out_dir(settings)
    result = run_ot_experiment(settings, out_dir=out)
    rows = [(r["step"], r["kl_diag"], r["transport_cost"], result.w2_sq) for r in result.rows]
    write_csv(out / "ot_curve.csv", ["step", "kl", "transport_cost", "w2sq_reference"], rows)
    last = result.rows[-1]
    print(f"w2sq_reference = {result.w2_sq:.6g}")
    print(f"final kl = {last['kl_diag']:.4g}, transport_cost = {last['transport_cost']:.6g}")
    print(f"spearman rho(kl, |cost - w2sq|) = {result.spearman_rho:.4f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sample": cmd_sample,
    "invert": cmd_invert,
    "density-grid": cmd_density_grid,
    "ot-experiment": cmd_ot_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpflow", description="Convex potential flows.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--data", help="toy:NAME, csv:PATH or gaussian_ot")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="checkpoint path")
        p.add_argument("--input", help="input CSV for invert")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--cg-atol", type=float)
        p.add_argument("--grid-bounds", help="x1min,x1max,x2min,x2max")
        p.add_argument("--grid-res", type=int)
        p.add_argument("--n", type=int, help="sample count")
        p.add_argument("--dim", type=int, help="dimension of gaussian_ot data")
        p.add_argument("--potential", action="store_true", default=None, help="also write potential and mesh CSVs")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    base = OT_DEFAULTS if args.command == "ot-experiment" else None
    try:
        settings = resolve_settings(args, base)
        return COMMANDS[args.command](settings)
    except (ConfigError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, InversionError, IndefiniteError, NumericalBreakdown, StagnationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
