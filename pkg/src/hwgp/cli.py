"""Experiment harness: prediction benchmark, nonlinearity recovery, closed loop.

Configuration is a plain-text key=value file; every emitted CSV embeds the
seed, a hash of the effective configuration, and the package version as
``# key: value`` comment lines, so identical inputs reproduce identical files.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import hashlib
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .control import (
    BlackBoxController,
    ControllerConfig,
    ProposedController,
    RHCOptions,
    SPCController,
    closed_loop,
    sine_reference,
)
from .gpcore import NumericalError, fit_narx_gp, narx_predict
from .hankel import build_embedding
from .hyperopt import FitOptions, cross_validate_zeta, fit_jmapml
from .implicitgp import ImplicitGPModel
from .linpred import fit_subspace, subspace_predict
from .linsys import LinearStateSpace, make_hw_system, random_stable_system, simulate_hw
from .predict import PredictionQuery, PredictOptions, predict, recover_nonlinearities

__all__ = [
    "ExperimentConfig",
    "ConfigError",
    "load_config",
    "write_csv",
    "demo_plant",
    "cmd_predict_bench",
    "cmd_recover",
    "cmd_control",
    "main",
]

BENCH_METHODS = ("algorithm1", "no_hyperprior", "blackbox", "linear")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Experiment constants; defaults follow the benchmark setup."""

    seed: int = 1
    n_train: int = 100
    test_len: int = 200
    past_len: int = 2
    future_len: int = 4
    noise_std: float = 0.01
    input_nl: str = "u+sin(u)"
    output_nl: str = "y+sin(y)"
    target_h2: float = 10.0
    trials: int = 10
    use_cv: bool = False
    zeta_lam: float = 2.0
    zeta_alpha: float = 0.9
    cv_lambdas: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    cv_alphas: tuple = (0.5, 0.6, 0.7, 0.8, 0.9)
    cv_split: float = 0.75
    fit_max_iter: int = 120
    fit_starts: int = 1
    pso_swarm: int = 20
    pso_iters: int = 30
    recover_grid: int = 101
    ctrl_steps: int = 200
    ctrl_p: float = 0.7
    ctrl_m_lip: float = 2.0
    ctrl_penalty: float = 100.0
    ctrl_q: float = 1.0
    ctrl_r: float = 1.0
    ref_amp: float = 2.0
    ref_period: float = 40.0
    y_bound: float = 2.5
    workers: int = 1
    out_dir: str = "results"

    def __post_init__(self) -> None:
        for name in ("n_train", "test_len", "past_len", "future_len", "trials",
                     "recover_grid", "ctrl_steps", "fit_max_iter", "fit_starts", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0 < self.ctrl_p < 1:
            raise ConfigError("ctrl_p must lie in (0, 1)")


def parse_nonlinearity(spec: str) -> Callable:
    s = spec.strip().lower().replace(" ", "")
    if s in ("identity", "id", "linear"):
        return lambda v: v
    if s in ("u+sin(u)", "y+sin(y)", "x+sin(x)", "v+sin(v)"):
        return lambda v: v + np.sin(v)
    raise ConfigError(f"unknown nonlinearity spec {spec!r}")


def _parse_value(raw: str, ftype):
    raw = raw.strip()
    if ftype is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw}")
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    if ftype is tuple:
        return tuple(float(v) for v in raw.split(",") if v.strip())
    return raw


def load_config(path) -> ExperimentConfig:
    """Read a key=value configuration file; missing keys take the defaults."""
    ftypes = {f.name: f.type for f in fields(ExperimentConfig)}
    # dataclass field types may be strings under `from __future__ import annotations`
    typemap = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in ftypes:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        ftype = ftypes[key]
        if isinstance(ftype, str):
            ftype = typemap.get(ftype, str)
        try:
            values[key] = _parse_value(raw, ftype)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_items(config: ExperimentConfig) -> list[tuple[str, str]]:
    out = []
    for f in sorted(fields(config), key=lambda f: f.name):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        out.append((f.name, str(v)))
    return out


def config_hash(config: ExperimentConfig) -> str:
    blob = "\n".join(f"{k}={v}" for k, v in config_items(config))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_csv(path, fieldnames, rows, meta: Optional[dict] = None) -> Path:
    """Write rows with a header; provenance appears as leading # comment lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", newline="") as fh:
            for key, value in (meta or {}).items():
                fh.write(f"# {key}: {value}\n")
            writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc
    return path


def _meta(config: ExperimentConfig, extra: Optional[dict] = None) -> dict:
    meta = {"version": f"hwgp-{__version__}", "seed": config.seed,
            "config_hash": config_hash(config)}
    meta.update({f"config.{k}": v for k, v in config_items(config)})
    if extra:
        meta.update(extra)
    return meta


def demo_plant() -> LinearStateSpace:
    """Fixed second-order plant used by the closed-loop demonstration."""
    A = np.array([[-0.24, -0.36], [1.0, 0.0]])
    B = np.array([[1.0], [0.0]])
    C = np.array([[10.0, 0.0]])
    D = np.array([[0.0]])
    return LinearStateSpace(A=A, B=B, C=C, D=D)


def _fit_options(config: ExperimentConfig, use_hyperprior: bool = True) -> FitOptions:
    return FitOptions(max_iter=config.fit_max_iter, n_starts=config.fit_starts,
                      use_hyperprior=use_hyperprior)


def _select_zeta(config: ExperimentConfig, train) -> tuple[float, float]:
    if not config.use_cv:
        return config.zeta_lam, config.zeta_alpha
    return cross_validate_zeta(
        train, config.past_len, config.future_len,
        config.cv_lambdas, config.cv_alphas, split=config.cv_split,
        options=_fit_options(config),
    )


def _make_plant_and_data(config: ExperimentConfig, trial: int, lin=None):
    psi = parse_nonlinearity(config.input_nl)
    phi_inv = parse_nonlinearity(config.output_nl)
    if lin is None:
        lin = random_stable_system(2, seed=config.seed + trial, target_h2=config.target_h2)
    sys = make_hw_system(lin, psi=psi, phi_inv=phi_inv, sigma=config.noise_std)
    rng_u = np.random.default_rng([config.seed, trial, 1])
    u_train = rng_u.standard_normal(config.n_train)
    u_test = rng_u.standard_normal(config.test_len)
    train = simulate_hw(sys, u_train, seed=np.random.default_rng([config.seed, trial, 2]).integers(2**31))
    test = simulate_hw(sys, u_test, seed=np.random.default_rng([config.seed, trial, 3]).integers(2**31))
    return sys, train, test


def _bench_trial(config: ExperimentConfig, trial: int) -> dict:
    L0, Lp = config.past_len, config.future_len
    L = L0 + Lp
    try:
        sys, train, test = _make_plant_and_data(config, trial)
        emb = build_embedding(train, L0, Lp)
        arx = fit_subspace(emb.H_u, emb.H_y, L0, Lp)
        zeta = _select_zeta(config, train)
        hyper_full = fit_jmapml(emb, zeta, options=_fit_options(config, True))
        hyper_abl = fit_jmapml(emb, zeta, options=_fit_options(config, False))
        model_full = ImplicitGPModel(emb, hyper_full)
        model_abl = ImplicitGPModel(emb, hyper_abl)
        narx = fit_narx_gp(train, L0, Lp)

        pred_opts = PredictOptions(swarm_size=config.pso_swarm, pso_iters=config.pso_iters,
                                   polish_max_iter=100)
        n_win = len(test) - L + 1
        errs = {m: np.empty((n_win, Lp)) for m in BENCH_METHODS}
        for k in range(n_win):
            u_win = test.u[k : k + L]
            y_past = test.y[k : k + L0]
            truth = test.y0[k + L0 : k + L]
            q = PredictionQuery(u=u_win, y_p=y_past, criterion="mmse")
            yf_full, _ = predict(model_full, q, seed=1000 + k, options=pred_opts)
            yf_abl, _ = predict(model_abl, q, seed=2000 + k, options=pred_opts)
            yf_bb, _ = narx_predict(narx, u_win, y_past)
            yf_lin = subspace_predict(arx, u_win, y_past)
            errs["algorithm1"][k] = yf_full - truth
            errs["no_hyperprior"][k] = yf_abl - truth
            errs["blackbox"][k] = yf_bb - truth
            errs["linear"][k] = yf_lin - truth
        rmse = {m: np.sqrt(np.mean(errs[m] ** 2, axis=0)) for m in BENCH_METHODS}
        return {"trial": trial, "failed": False, "rmse": rmse,
                "zeta": zeta, "error": ""}
    except Exception as exc:  # per-trial failures are logged, not fatal
        return {"trial": trial, "failed": True, "rmse": None, "zeta": None, "error": repr(exc)}


def cmd_predict_bench(config: ExperimentConfig) -> tuple[list[dict], Path]:
    """Monte Carlo multi-step prediction benchmark over random plants."""
    trials = list(range(config.trials))
    if config.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=config.workers) as ex:
            results = list(ex.map(_bench_trial, [config] * len(trials), trials))
    else:
        results = [_bench_trial(config, t) for t in trials]

    Lp = config.future_len
    rows = []
    ok = [r for r in results if not r["failed"]]
    for r in results:
        if r["failed"]:
            continue
        for method in BENCH_METHODS:
            for l in range(Lp):
                rows.append({"trial": r["trial"], "method": method, "step": l + 1,
                             "rmse": repr(float(r["rmse"][method][l]))})
    for method in BENCH_METHODS:
        for l in range(Lp):
            med = float(np.median([r["rmse"][method][l] for r in ok])) if ok else float("nan")
            rows.append({"trial": "median", "method": method, "step": l + 1, "rmse": repr(med)})
    n_failed = sum(r["failed"] for r in results)
    meta = _meta(config, {"n_trials": config.trials, "n_failed": n_failed,
                          "failures": ";".join(r["error"] for r in results if r["failed"])})
    path = write_csv(Path(config.out_dir) / "predict_bench.csv",
                     ["trial", "method", "step", "rmse"], rows, meta)
    return rows, path


def cmd_recover(config: ExperimentConfig) -> tuple[list[dict], Path]:
    """Fit one plant and emit the recovered nonlinearities on a [-pi, pi] grid."""
    L0, Lp = config.past_len, config.future_len
    sys, train, _ = _make_plant_and_data(config, 0)
    emb = build_embedding(train, L0, Lp)
    zeta = _select_zeta(config, train)
    hyper = fit_jmapml(emb, zeta, options=_fit_options(config))
    model = ImplicitGPModel(emb, hyper)
    grid = np.linspace(-np.pi, np.pi, config.recover_grid)
    rec = recover_nonlinearities(model, grid, grid)
    psi_true = np.asarray(sys.psi(grid), dtype=float)
    phi_true = np.asarray(sys.phi(grid), dtype=float)
    rows = []
    for name, mean, std, truth in (
        ("psi", rec.psi_mean, rec.psi_std, psi_true),
        ("phi", rec.phi_mean, rec.phi_std, phi_true),
    ):
        for g, m, s, t in zip(grid, mean, std, truth):
            rows.append({"function": name, "grid": repr(float(g)), "mean": repr(float(m)),
                         "std": repr(float(s)), "truth": repr(float(t))})
    meta = _meta(config, {"zeta_lam": zeta[0], "zeta_alpha": zeta[1]})
    path = write_csv(Path(config.out_dir) / "recover.csv",
                     ["function", "grid", "mean", "std", "truth"], rows, meta)
    return rows, path


def _controller_config(config: ExperimentConfig) -> ControllerConfig:
    Lp = config.future_len
    H = np.vstack([np.eye(Lp), -np.eye(Lp)])
    q = np.full(2 * Lp, config.y_bound)
    return ControllerConfig(Q=config.ctrl_q * np.eye(Lp), R=config.ctrl_r * np.eye(Lp),
                            H=H, q=q, p=config.ctrl_p, M_lip=config.ctrl_m_lip,
                            soft_penalty=config.ctrl_penalty)


def cmd_control(config: ExperimentConfig) -> tuple[dict, list[Path]]:
    """Closed-loop comparison on the fixed plant: proposed, black-box, SPC."""
    L0, Lp = config.past_len, config.future_len
    sys, train, _ = _make_plant_and_data(config, 0, lin=demo_plant())
    emb = build_embedding(train, L0, Lp)
    arx = fit_subspace(emb.H_u, emb.H_y, L0, Lp)
    zeta = _select_zeta(config, train)
    hyper = fit_jmapml(emb, zeta, options=_fit_options(config))
    model = ImplicitGPModel(emb, hyper)
    narx = fit_narx_gp(train, L0, Lp)
    cc = _controller_config(config)
    ref = sine_reference(config.ref_amp, config.ref_period)
    controllers = {
        "proposed": ProposedController(model, cc, ref, seed=config.seed),
        "blackbox": BlackBoxController(narx, cc, ref, seed=config.seed),
        "spc": SPCController(arx, cc, ref),
    }
    logs = {}
    paths = []
    for name, ctrl in controllers.items():
        log = closed_loop(sys, ctrl, steps=config.ctrl_steps, seed=config.seed + 7)
        logs[name] = log
        rows = []
        for k in range(len(log)):
            rows.append({
                "k": k, "u": repr(float(log.u[k])), "y": repr(float(log.y[k])),
                "y0": repr(float(log.y0[k])), "r": repr(float(log.r[k])),
                "y_pred": repr(float(log.y_pred[k])), "pred_std": repr(float(log.pred_std[k])),
                "violation": int(log.violation[k]), "solve_time": repr(float(log.solve_time[k])),
            })
        inside = 1.0 - float(np.mean(log.violation))
        track_rmse = float(np.sqrt(np.mean((log.y0 - log.r) ** 2)))
        meta = _meta(config, {"controller": name, "inside_fraction": inside,
                              "tracking_rmse": track_rmse})
        paths.append(write_csv(Path(config.out_dir) / f"control_{name}.csv",
                               ["k", "u", "y", "y0", "r", "y_pred", "pred_std",
                                "violation", "solve_time"], rows, meta))
    return logs, paths


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="hwgp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("predict-bench", "recover", "control"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--full-scale", action="store_true",
                       help="50 trials, cross-validated hyperprior grid, 3 fit starts")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config) if args.config else ExperimentConfig()
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = args.out
        if args.trials is not None:
            overrides["trials"] = args.trials
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.full_scale:
            overrides.update({"trials": args.trials or 50, "use_cv": True, "fit_starts": 3})
        config = replace(config, **overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "predict-bench":
            _, path = cmd_predict_bench(config)
        elif args.command == "recover":
            _, path = cmd_recover(config)
        else:
            _, paths = cmd_control(config)
            path = paths[-1]
        print(f"wrote {path}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
