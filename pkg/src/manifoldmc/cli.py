"""Experiment harness: acceptance heatmaps, ESS sweeps, validation, single runs.

Configuration is a YAML file validated against an embedded JSON schema with a
mandatory ``schema_version`` field.  Every command writes delimited output
plus a JSON sidecar; the CSV column sets below are the versioned contract the
plotting front end consumes.

CSV contracts (version 1)
-------------------------
``heatmap.csv``:  sampler, sigma, eps, mean_accept, n_chains, n_samples,
    reject_metropolis, reject_nonreversible, reject_solver_failed,
    reject_divergent
``ess.csv``:      model, sampler, sigma, chain_set, min_ess, min_ess_per_sec,
    max_rhat, adapted_eps, mean_accept, n_chains, n_main, wall_seconds
``draws.csv``:    iteration, theta_*, accept_prob, accepted, reason, delta_h,
    newton_iters

Bodies of timing-free CSVs are byte-identical across reruns with the same
config and seed; wall-clock columns in ``ess.csv`` are the one documented
exception.  Timestamps only ever appear in the sidecar.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import models as md
from . import zoo
from .diagnostics import DiagnosticsReport
from .samplers import ChmcConfig, run_chain

SCHEMA_VERSION = 1

HEATMAP_COLUMNS = [
    "sampler",
    "sigma",
    "eps",
    "mean_accept",
    "n_chains",
    "n_samples",
    "reject_metropolis",
    "reject_nonreversible",
    "reject_solver_failed",
    "reject_divergent",
]
ESS_COLUMNS = [
    "model",
    "sampler",
    "sigma",
    "chain_set",
    "min_ess",
    "min_ess_per_sec",
    "max_rhat",
    "adapted_eps",
    "mean_accept",
    "n_chains",
    "n_main",
    "wall_seconds",
]

HEATMAP_SAMPLERS = (
    "chmc",
    "chmc_symmetric",
    "hmc",
    "rwm",
    "mala",
    "pd_rwm",
    "pd_mala_simple",
    "pd_mala_corrected",
)
SWEEP_SAMPLERS = ("chmc", "chmc_symmetric", "hmc_diag", "hmc_dense")

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "experiment", "model", "seed"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "experiment": {"enum": ["heatmap", "ess_sweep", "sample"]},
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "required": ["id"],
            "properties": {
                "id": {
                    "enum": ["toy_loop", "linear_gaussian", "nonlinear_ssm", "fhn"]
                },
                "t_steps": {"type": "integer", "minimum": 2},
                "data_seed": {"type": "integer", "minimum": 0},
                "steps_per_obs": {"type": "integer", "minimum": 1},
            },
        },
        "samplers": {
            "type": "array",
            "minItems": 1,
            "items": {"enum": list(dict.fromkeys(HEATMAP_SAMPLERS + SWEEP_SAMPLERS))},
        },
        "sigma_grid": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "eps_grid": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "n_chains": {"type": "integer", "minimum": 1},
        "n_samples": {"type": "integer", "minimum": 1},
        "n_steps": {"type": "integer", "minimum": 1},
        "n_chain_sets": {"type": "integer", "minimum": 1},
        "n_warmup": {"type": "integer", "minimum": 0},
        "n_main": {"type": "integer", "minimum": 1},
        "sampler": {"type": "string"},
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "solver": {"enum": ["newton", "symmetric_newton"]},
        "jitter_steps": {"type": "boolean"},
        "target_accept": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    },
    "additionalProperties": False,
}


def load_config(path) -> dict:
    import jsonschema
    import yaml

    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    jsonschema.validate(cfg, CONFIG_SCHEMA)
    return cfg


# -- model registry ----------------------------------------------------------------


def build_model(model_cfg: dict, sigma: float):
    """Instantiate a model (and, where relevant, its dataset) for one cell."""
    model_id = model_cfg["id"]
    if model_id == "toy_loop":
        return zoo.toy_loop_model(sigma)
    if model_id == "linear_gaussian":
        rng = np.random.default_rng(model_cfg.get("data_seed", 0))
        m = rng.standard_normal((2, 3))
        f = rng.standard_normal(2)
        y = rng.standard_normal(2)
        return zoo.linear_gaussian_model(m, f, sigma, y)
    if model_id == "nonlinear_ssm":
        dataset = zoo.simulate_nonlinear_ssm(
            t_steps=model_cfg.get("t_steps", 100),
            sigma=sigma,
            seed=model_cfg.get("data_seed", 20240501),
        )
        return dataset
    if model_id == "fhn":
        return zoo.simulate_fhn(
            sigma,
            seed=model_cfg.get("data_seed", 20240502),
            steps_per_obs=model_cfg.get("steps_per_obs", 5),
        )
    raise ValueError(f"unknown model id {model_id!r}")


def interest_names(model_id: str) -> list[str]:
    if model_id == "toy_loop":
        return ["theta0", "theta1"]
    if model_id == "nonlinear_ssm":
        return ["mu", "log_gamma", "atanh_rho", "log_sigma"]
    if model_id == "fhn":
        return [
            "x0_init",
            "x1_init",
            "log_alpha",
            "log_beta",
            "log_gamma",
            "log_delta",
            "log_epsilon",
            "log_zeta",
            "log_sigma",
        ]
    return []


# -- deterministic formatting ---------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, columns: list[str], rows: list[dict]):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def write_sidecar(path: Path, payload: dict):
    payload = dict(payload)
    payload["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    payload["package_version"] = __version__
    path.write_text(json.dumps(payload, indent=2, default=str) + "\n")


def _cell_seed(root_seed: int, *key) -> int:
    return int(np.random.SeedSequence(root_seed, spawn_key=key).generate_state(1)[0])


# -- heatmap command -------------------------------------------------------------------


def _heatmap_cell(task: dict) -> dict:
    model_cfg = task["model"]
    sampler = task["sampler"]
    sigma, eps = task["sigma"], task["eps"]
    model = build_model(model_cfg, sigma)
    n_chains, n_samples = task["n_chains"], task["n_samples"]
    if model_cfg["id"] == "toy_loop":
        starts = zoo.equispaced_loop_points(n_chains)
    else:
        rng = np.random.default_rng(_cell_seed(task["seed"], task["index"], 999))
        starts = [model.prior_sample(rng) for _ in range(n_chains)]

    kwargs: dict = {"eps": eps, "adapt": False}
    sampler_name = sampler
    if sampler in ("chmc", "chmc_symmetric"):
        solver = "symmetric_newton" if sampler == "chmc_symmetric" else "newton"
        kwargs["chmc"] = ChmcConfig(eps=eps, n_steps=task["n_steps"], solver=solver)
        sampler_name = "chmc"
    elif sampler == "hmc":
        kwargs["n_leapfrog"] = task["n_steps"]

    accept_probs = []
    counts = {r: 0 for r in ("metropolis", "nonreversible", "solver_failed", "divergent")}
    for chain in range(n_chains):
        trace = run_chain(
            model,
            sampler_name,
            seed=_cell_seed(task["seed"], task["index"], chain),
            n_warmup=0,
            n_main=n_samples,
            init_theta=starts[chain],
            store_latent=False,
            **kwargs,
        )
        accept_probs.append(trace.accept_probs)
        for reason, cnt in trace.reason_counts().items():
            counts[reason] += cnt
    return {
        "sampler": sampler,
        "sigma": sigma,
        "eps": eps,
        "mean_accept": float(np.mean(np.concatenate(accept_probs))),
        "n_chains": n_chains,
        "n_samples": n_samples,
        "reject_metropolis": counts["metropolis"],
        "reject_nonreversible": counts["nonreversible"],
        "reject_solver_failed": counts["solver_failed"],
        "reject_divergent": counts["divergent"],
    }


def cmd_heatmap(cfg: dict, out_dir: Path, workers: int = 1) -> Path:
    """Mean acceptance over a (sampler, sigma, eps) grid; one CSV row per cell."""
    tasks = []
    index = 0
    for sampler in cfg["samplers"]:
        for sigma in cfg["sigma_grid"]:
            for eps in cfg["eps_grid"]:
                tasks.append(
                    {
                        "index": index,
                        "model": cfg["model"],
                        "sampler": sampler,
                        "sigma": float(sigma),
                        "eps": float(eps),
                        "n_chains": cfg.get("n_chains", 4),
                        "n_samples": cfg.get("n_samples", 1000),
                        "n_steps": cfg.get("n_steps", 10),
                        "seed": cfg["seed"],
                    }
                )
                index += 1
    rows = _run_tasks(_heatmap_cell, tasks, workers)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "heatmap.csv"
    write_csv(csv_path, HEATMAP_COLUMNS, rows)
    sidecar = {
        "command": "heatmap",
        "config": cfg,
        "csv_schema_version": SCHEMA_VERSION,
        "columns": HEATMAP_COLUMNS,
    }
    if cfg["model"]["id"] == "toy_loop":
        pts = zoo.equispaced_loop_points(cfg.get("n_chains", 4))
        sidecar["init_points"] = pts.tolist()
        sidecar["init_parametrization"] = (
            "equal arc-length fractions of the limiting loop, measured numerically"
        )
    write_sidecar(out_dir / "heatmap.meta.json", sidecar)
    return csv_path


# -- ess sweep command -------------------------------------------------------------------


def _sweep_cell(task: dict) -> dict:
    model_cfg = task["model"]
    sampler = task["sampler"]
    sigma = task["sigma"]
    set_idx = task["chain_set"]
    n_chains, n_warmup, n_main = task["n_chains"], task["n_warmup"], task["n_main"]
    built = build_model(model_cfg, sigma)
    model_id = model_cfg["id"]

    traces = []
    for chain in range(n_chains):
        seed = _cell_seed(task["seed"], task["index"], set_idx, chain)
        kwargs: dict = {}
        if model_id == "nonlinear_ssm":
            from .ssm import SsmGeometry

            spec = zoo.nonlinear_ssm_spec(built.observed)
            if sampler.startswith("chmc"):
                solver = "symmetric_newton" if sampler.endswith("symmetric") else "newton"
                kwargs["geometry"] = SsmGeometry(spec, structured=True)
                kwargs["chmc"] = ChmcConfig(
                    eps=task.get("eps", 0.5),
                    n_steps=task["n_steps"],
                    solver=solver,
                    jitter_steps=task.get("jitter_steps", False),
                )
                name = "chmc"
            else:
                kwargs["target"] = zoo.SsmHmcTarget(built.observed)
                kwargs["metric_kind"] = "diagonal" if sampler == "hmc_diag" else "dense"
                kwargs["n_leapfrog"] = task["n_steps"]
                kwargs["eps"] = task.get("eps", 0.1)
                name = "hmc"
        else:
            model = (
                zoo.fhn_model(built.observed, steps_per_obs=model_cfg.get("steps_per_obs", 5))
                if model_id == "fhn"
                else built
            )
            kwargs["model"] = model
            if sampler.startswith("chmc"):
                solver = "symmetric_newton" if sampler.endswith("symmetric") else "newton"
                kwargs["chmc"] = ChmcConfig(
                    eps=task.get("eps", 0.5),
                    n_steps=task["n_steps"],
                    solver=solver,
                    jitter_steps=task.get("jitter_steps", False),
                )
                name = "chmc"
            else:
                kwargs["metric_kind"] = "diagonal" if sampler == "hmc_diag" else "dense"
                kwargs["n_leapfrog"] = task["n_steps"]
                kwargs["eps"] = task.get("eps", 0.1)
                name = "hmc"
        model_arg = kwargs.pop("model", None)
        traces.append(
            run_chain(
                model_arg,
                name,
                seed=seed,
                n_warmup=n_warmup,
                n_main=n_main,
                target_accept=task.get("target_accept", 0.9),
                **kwargs,
            )
        )

    names = interest_names(model_id)
    n_interest = len(names) if names else traces[0].thetas.shape[1]
    if not names:
        names = [f"theta{i}" for i in range(n_interest)]
    report = DiagnosticsReport.from_traces(
        traces, names=names, extract=lambda t: t.thetas[:, :n_interest]
    )
    return {
        "model": model_id,
        "sampler": sampler,
        "sigma": sigma,
        "chain_set": set_idx,
        "min_ess": report.min_ess(),
        "min_ess_per_sec": report.min_ess() / report.wall_seconds,
        "max_rhat": report.max_rhat(),
        "adapted_eps": float(np.mean([t.adapted_eps for t in traces])),
        "mean_accept": float(np.mean([t.mean_accept for t in traces])),
        "n_chains": n_chains,
        "n_main": n_main,
        "wall_seconds": report.wall_seconds,
    }


def cmd_ess_sweep(cfg: dict, out_dir: Path, workers: int = 1) -> Path:
    """Adaptive chains per (sampler, sigma); min bulk-ESS/time and max R-hat."""
    tasks = []
    index = 0
    for sampler in cfg["samplers"]:
        for sigma in cfg["sigma_grid"]:
            for set_idx in range(cfg.get("n_chain_sets", 3)):
                task = {
                    "index": index,
                    "model": cfg["model"],
                    "sampler": sampler,
                    "sigma": float(sigma),
                    "chain_set": set_idx,
                    "n_chains": cfg.get("n_chains", 4),
                    "n_warmup": cfg.get("n_warmup", 1000),
                    "n_main": cfg.get("n_main", 2500),
                    "n_steps": cfg.get("n_steps", 10),
                    "jitter_steps": cfg.get("jitter_steps", False),
                    "target_accept": cfg.get("target_accept", 0.9),
                    "seed": cfg["seed"],
                }
                if "eps" in cfg:
                    task["eps"] = cfg["eps"]
                tasks.append(task)
                index += 1
    rows = _run_tasks(_sweep_cell, tasks, workers)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ess.csv"
    write_csv(csv_path, ESS_COLUMNS, rows)
    write_sidecar(
        out_dir / "ess.meta.json",
        {
            "command": "ess_sweep",
            "config": cfg,
            "csv_schema_version": SCHEMA_VERSION,
            "columns": ESS_COLUMNS,
            "timing_columns": ["min_ess_per_sec", "wall_seconds"],
        },
    )
    return csv_path


# -- sample command ---------------------------------------------------------------------


def cmd_sample(cfg: dict, out_dir: Path) -> Path:
    """One chain, full per-iteration trace to CSV."""
    sigma = cfg.get("sigma", 0.1)
    built = build_model(cfg["model"], sigma)
    model_id = cfg["model"]["id"]
    sampler = cfg.get("sampler", "chmc")
    kwargs: dict = {}
    model_arg = built
    if model_id == "nonlinear_ssm":
        from .ssm import SsmGeometry

        spec = zoo.nonlinear_ssm_spec(built.observed)
        model_arg = None
        if sampler == "chmc":
            kwargs["geometry"] = SsmGeometry(spec, structured=True)
        else:
            kwargs["target"] = zoo.SsmHmcTarget(built.observed)
    elif model_id == "fhn":
        model_arg = zoo.fhn_model(built.observed)
    if sampler == "chmc":
        kwargs["chmc"] = ChmcConfig(
            eps=cfg.get("eps", 0.5),
            n_steps=cfg.get("n_steps", 10),
            solver=cfg.get("solver", "newton"),
        )
    else:
        kwargs["eps"] = cfg.get("eps", 0.1)
        kwargs["n_leapfrog"] = cfg.get("n_steps", 10)
    trace = run_chain(
        model_arg,
        sampler,
        seed=cfg["seed"],
        n_warmup=cfg.get("n_warmup", 0),
        n_main=cfg.get("n_main", 100),
        **kwargs,
    )
    dim = trace.thetas.shape[1]
    columns = (
        ["iteration"]
        + [f"theta{i}" for i in range(dim)]
        + ["accept_prob", "accepted", "reason", "delta_h", "newton_iters"]
    )
    rows = []
    for i in range(trace.thetas.shape[0]):
        row = {"iteration": i}
        for j in range(dim):
            row[f"theta{j}"] = trace.thetas[i, j]
        row.update(
            accept_prob=trace.accept_probs[i],
            accepted=bool(trace.accepted[i]),
            reason=trace.reasons[i] or "",
            delta_h=trace.delta_h[i],
            newton_iters=int(trace.newton_iters[i]),
        )
        rows.append(row)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "draws.csv"
    write_csv(csv_path, columns, rows)
    write_sidecar(
        out_dir / "draws.meta.json",
        {
            "command": "sample",
            "config": cfg,
            "csv_schema_version": SCHEMA_VERSION,
            "columns": columns,
            "adapted_eps": trace.adapted_eps,
        },
    )
    return csv_path


# -- validate command ----------------------------------------------------------------------


def cmd_validate(model_id: str, seed: int = 0) -> tuple[list[dict], bool]:
    """Cross-check shipped derivatives against finite-difference oracles."""
    rng = np.random.default_rng(seed)
    if model_id == "toy_loop":
        model = zoo.toy_loop_model(0.1)
    elif model_id == "toy_loop_bad_jacobian":
        # intentionally corrupted analytic Jacobian; must fail validation
        base = zoo.toy_loop_model(0.1)
        fields = {f: getattr(base, f) for f in base.__dataclass_fields__}
        fields["jacobian"] = lambda th: np.array([[4.0 * th[0] ** 3, 2.0 * th[1]]])
        model = md.ModelSpec(**fields)
    elif model_id == "linear_gaussian":
        m = rng.standard_normal((2, 3))
        model = zoo.linear_gaussian_model(
            m, rng.standard_normal(2), 0.5, rng.standard_normal(2)
        )
    elif model_id == "fhn":
        dataset = zoo.simulate_fhn(0.1, seed=20240502)
        model = zoo.fhn_model(dataset.observed)
    elif model_id == "nonlinear_ssm":
        dataset = zoo.simulate_nonlinear_ssm(t_steps=6, sigma=0.3, seed=20240501)
        spec = zoo.nonlinear_ssm_spec(dataset.observed)
        return _validate_ssm(spec, rng)
    else:
        raise ValueError(f"unknown model id {model_id!r}")
    n_points = 5 if model_id == "fhn" else 20
    point_sampler = None
    if model_id == "fhn":
        point_sampler = lambda r: zoo.fhn_truth_theta(0.1) + 0.05 * r.standard_normal(9)
    checks = md.validate_model(model, rng, n_points=n_points, point_sampler=point_sampler)
    return checks, all(c["passed"] for c in checks)


def _validate_ssm(spec, rng) -> tuple[list[dict], bool]:
    from . import ssm as sm

    worst_block = 0.0
    worst_hess = 0.0
    worst_gram = 0.0
    for _ in range(5):
        theta = spec.prior_sample(rng)
        phi, nu = theta[:4], theta[4:]
        eta = spec.initial_eta(phi, nu)
        fast = spec.vectorized.blocks(phi, nu, eta)
        slow, slow_hess = sm._generic_blocks(spec, phi, nu, eta)
        for name in ("resid", "u", "d_nu", "a", "b"):
            worst_block = max(
                worst_block,
                float(np.max(np.abs(getattr(fast, name) - getattr(slow, name)))),
            )
        worst_hess = max(
            worst_hess,
            float(np.max(np.abs(spec.vectorized.hessians(phi, nu, eta) - slow_hess))),
        )
        gram = sm.build_structured_gram(spec, phi, nu, eta)
        jac = sm.dense_jacobian_from_blocks(fast)
        worst_gram = max(
            worst_gram, float(np.max(np.abs(gram.as_dense() - jac @ jac.T)))
        )
    checks = [
        {"check": "vectorized_blocks_vs_ad", "max_rel_error": worst_block, "passed": worst_block <= 1e-8},
        {"check": "vectorized_hessians_vs_ad", "max_rel_error": worst_hess, "passed": worst_hess <= 1e-8},
        {"check": "structured_gram_vs_dense", "max_rel_error": worst_gram, "passed": worst_gram <= 1e-8},
    ]
    return checks, all(c["passed"] for c in checks)


# -- worker pool ------------------------------------------------------------------------------


def _run_tasks(fn, tasks: list[dict], workers: int) -> list[dict]:
    """Run cells possibly in parallel; output order is fixed by cell index."""
    if workers <= 1 or len(tasks) <= 1:
        results = [fn(t) for t in tasks]
    else:
        with multiprocessing.get_context("spawn").Pool(workers) as pool:
            results = pool.map(fn, tasks)
    return results


# -- entry point --------------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="manifoldmc",
        description="Constrained HMC experiment harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("heatmap", "ess-sweep", "sample"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out-dir", required=True, type=Path)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    pv = sub.add_parser("validate")
    pv.add_argument("--model", required=True, help="model id (empty rejects)")
    pv.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)

    if args.command == "validate":
        if not args.model:
            parser.error("--model must not be empty")
        checks, passed = cmd_validate(args.model, args.seed)
        for check in checks:
            status = "ok" if check["passed"] else "FAIL"
            print(f"{status:4s} {check['check']}: max_rel_error={check['max_rel_error']:.3e}")
        return 0 if passed else 1

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    expected = args.command.replace("-", "_")
    if cfg["experiment"] != expected:
        print(
            f"config declares experiment {cfg['experiment']!r}, command is {expected!r}",
            file=sys.stderr,
        )
        return 2
    if args.command == "heatmap":
        path = cmd_heatmap(cfg, args.out_dir, args.workers)
    elif args.command == "ess-sweep":
        path = cmd_ess_sweep(cfg, args.out_dir, args.workers)
    else:
        path = cmd_sample(cfg, args.out_dir)
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
