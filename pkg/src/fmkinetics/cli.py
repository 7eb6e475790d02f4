"""Config-driven batch experiment runner.

One JSON config, one experiment, one output directory of CSV/JSON artifacts.
All randomness flows from config seeds, so reruns are bit-identical; every
artifact embeds the library version and the sha256 of the config bytes.
Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import importlib
import json
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .core import (
    AffineSchedule,
    Dataset,
    GaussianParams,
    SourceKernel,
    T_MAX_DEFAULT,
    regularized_rf_schedule,
    rf_schedule,
    sample_source,
)
from .diagnostics import asymmetry_report
from .ot import (
    GaussianTransport,
    chisq_tail_bound,
    chisq_tail_monte_carlo,
    gaussian_mgf,
    gaussian_mgf_monte_carlo,
    gaussian_source_tail_constants,
)
from .tails import (
    InsufficientDataError,
    TailFitError,
    bound_domination_check,
    dkw_radius,
    fit_exponential_tail,
    fit_polynomial_tail,
    survival_function,
)
from .transport import (
    IntegratorConfig,
    IntegrationDivergedError,
    batch_endpoints,
    batch_energies,
)
from .velocity import EmpiricalField, PopulationGaussianField

SEED_OVERRIDE_ENV = "FMK_SEED_OVERRIDE"

EXPERIMENTS = ("sample", "energy", "tails", "gradcheck", "ot-compare", "bounds")


class ConfigError(ValueError):
    """Anything wrong with the config document or referenced files."""


CONFIG_SCHEMA = {
    "type": "object",
    "required": ["experiment", "output_dir", "mc"],
    "additionalProperties": False,
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "output_dir": {"type": "string"},
        "t_max": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "generator": {
                    "type": "object",
                    "required": ["kind", "n", "d", "seed"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["gaussian", "student_t"]},
                        "n": {"type": "integer", "minimum": 1},
                        "d": {"type": "integer", "minimum": 1},
                        "seed": {"type": "integer", "minimum": 0},
                        "dof": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
            },
        },
        "source": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["standard_gaussian", "student_t"]},
                "dof": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "schedule": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["rf", "rf_regularized", "custom"]},
                "sigma_min": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "import": {"type": "string"},
            },
        },
        "integrator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": ["euler", "rk4"]},
                "steps": {"type": "integer", "minimum": 1},
                "t_end": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "mc": {
            "type": "object",
            "required": ["seed", "count"],
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "count": {"type": "integer", "minimum": 1},
                "probe_times": {"type": "array", "items": {"type": "number"}},
            },
        },
        "target": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mean": {"type": "array", "items": {"type": "number"}},
                "cov": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                "path": {"type": "string"},
            },
        },
        "tail_fit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "quantile": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t": {"type": "number", "minimum": 0},
                "T": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "mgf_cases": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "items": {"type": "number"},
                        "minItems": 2,
                        "maxItems": 2,
                    },
                },
                "mgf_draws": {"type": "integer", "minimum": 1000},
                "chisq_s": {"type": "number", "minimum": 2},
                "chisq_d": {"type": "integer", "minimum": 1},
                "chisq_draws": {"type": "integer", "minimum": 1000},
                "mc_seed": {"type": "integer", "minimum": 0},
            },
        },
    },
}


def _load_config(path: Path) -> tuple[dict, str]:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    digest = hashlib.sha256(raw).hexdigest()
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "$" + "".join(f"[{p!r}]" for p in exc.absolute_path)
        raise ConfigError(f"{path}: at {where}: {exc.message}") from None
    return cfg, digest


def _apply_seed_override(cfg: dict) -> None:
    raw = os.environ.get(SEED_OVERRIDE_ENV)
    if raw is None:
        return
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_OVERRIDE_ENV}={raw!r} is not an integer") from None
    cfg["mc"]["seed"] = seed
    gen = cfg.get("dataset", {}).get("generator")
    if gen is not None:
        gen["seed"] = seed
    if "bounds" in cfg and "mc_seed" in cfg["bounds"]:
        cfg["bounds"]["mc_seed"] = seed


def _section(cfg: dict, key: str) -> dict:
    if key not in cfg:
        raise ConfigError(f"experiment {cfg['experiment']!r} requires a {key!r} section")
    return cfg[key]


def _build_dataset(spec: dict, base_dir: Path) -> Dataset:
    has_path = "path" in spec
    has_gen = "generator" in spec
    if has_path == has_gen:
        raise ConfigError("dataset needs exactly one of 'path' or 'generator'")
    if has_path:
        path = Path(spec["path"])
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"dataset file does not exist: {path}")
        try:
            if path.suffix.lower() == ".json":
                return Dataset.from_json(path)
            return Dataset.from_csv(path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    gen = spec["generator"]
    if gen["kind"] == "student_t":
        if "dof" not in gen:
            raise ConfigError("student_t dataset generator requires 'dof'")
        kernel = SourceKernel("student_t", dim=gen["d"], dof=gen["dof"])
    else:
        kernel = SourceKernel("standard_gaussian", dim=gen["d"])
    return Dataset(sample_source(kernel, gen["seed"], gen["n"]))


def _build_kernel(spec: dict, dim: int) -> SourceKernel:
    if spec["kind"] == "student_t":
        if "dof" not in spec:
            raise ConfigError("student_t source requires 'dof'")
        return SourceKernel("student_t", dim=dim, dof=spec["dof"])
    return SourceKernel("standard_gaussian", dim=dim)


def _build_schedule(spec: dict) -> AffineSchedule:
    kind = spec["kind"]
    if kind == "rf":
        return rf_schedule()
    if kind == "rf_regularized":
        if "sigma_min" not in spec:
            raise ConfigError("rf_regularized schedule requires 'sigma_min'")
        return regularized_rf_schedule(spec["sigma_min"])
    ref = spec.get("import")
    if not ref or ":" not in ref:
        raise ConfigError("custom schedule requires 'import': 'module:attribute'")
    mod_name, attr = ref.split(":", 1)
    try:
        obj = getattr(importlib.import_module(mod_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot import custom schedule {ref!r}: {exc}") from None
    if callable(obj) and not isinstance(obj, AffineSchedule):
        obj = obj()
    if not isinstance(obj, AffineSchedule):
        raise ConfigError(f"custom schedule {ref!r} is not an AffineSchedule")
    return obj


def _build_integrator(cfg: dict) -> IntegratorConfig:
    spec = cfg.get("integrator", {})
    try:
        return IntegratorConfig(
            method=spec.get("method", "rk4"),
            steps=spec.get("steps", 256),
            t_end=spec.get("t_end", 0.99),
        )
    except ValueError as exc:
        raise ConfigError(f"integrator: {exc}") from None


def _build_target(cfg: dict, base_dir: Path) -> GaussianParams:
    spec = _section(cfg, "target")
    if "path" in spec:
        path = Path(spec["path"])
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"target file does not exist: {path}")
        try:
            return GaussianParams.from_json(path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if "mean" not in spec or "cov" not in spec:
        raise ConfigError("target needs 'mean' and 'cov' (or 'path')")
    try:
        return GaussianParams(np.asarray(spec["mean"]), np.asarray(spec["cov"]))
    except ValueError as exc:
        raise ConfigError(f"target: {exc}") from None


def _build_empirical_field(cfg: dict, base_dir: Path) -> tuple[EmpiricalField, SourceKernel]:
    dataset = _build_dataset(_section(cfg, "dataset"), base_dir)
    kernel = _build_kernel(_section(cfg, "source"), dataset.dim)
    schedule = _build_schedule(_section(cfg, "schedule"))
    t_max = cfg.get("t_max", T_MAX_DEFAULT)
    return EmpiricalField(dataset, schedule, kernel, t_max=t_max), kernel


def _write_json(path: Path, payload: dict, meta: dict) -> None:
    doc = {"meta": meta}
    doc.update(payload)
    with open(path, "w", newline="\n") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_points_csv(path: Path, header: list[str], rows: np.ndarray, meta: dict) -> None:
    with open(path, "w", newline="\n") as f:
        tags = " ".join(f"{k}={v}" for k, v in meta.items())
        f.write(f"# {tags}\n")
        f.write(",".join(header) + "\n")
        for i, row in enumerate(rows):
            f.write(",".join([str(i)] + [format(v, ".17g") for v in row]) + "\n")


# --- experiments -------------------------------------------------------------


def _run_sample(cfg, base_dir, out_dir, meta, workers):
    field, kernel = _build_empirical_field(cfg, base_dir)
    integ = _build_integrator(cfg)
    mc = cfg["mc"]
    x0 = sample_source(kernel, mc["seed"], mc["count"])
    ends = batch_endpoints(field, x0, integ, workers=workers)
    header = ["sample_index"] + [f"z_{k + 1}" for k in range(field.dataset.dim)]
    _write_points_csv(out_dir / "endpoints.csv", header, ends, meta)


def _run_energy(cfg, base_dir, out_dir, meta, workers):
    field, kernel = _build_empirical_field(cfg, base_dir)
    integ = _build_integrator(cfg)
    mc = cfg["mc"]
    table = batch_energies(
        field,
        kernel,
        integ,
        seed=mc["seed"],
        count=mc["count"],
        probe_times=mc.get("probe_times", ()),
        workers=workers,
    )
    table.to_csv(out_dir / "energies.csv", metadata=meta)
    return table


def _run_tails(cfg, base_dir, out_dir, meta, workers):
    field, kernel = _build_empirical_field(cfg, base_dir)
    integ = _build_integrator(cfg)
    mc = cfg["mc"]
    table = batch_energies(
        field,
        kernel,
        integ,
        seed=mc["seed"],
        count=mc["count"],
        probe_times=mc.get("probe_times", ()),
        workers=workers,
    )
    table.to_csv(out_dir / "energies.csv", metadata=meta)
    curve = survival_function(table.e_total)
    curve.to_csv(out_dir / "survival.csv", metadata=meta)

    q = cfg.get("tail_fit", {}).get("quantile", 0.95)
    fits = {}
    results = {}
    for name, fit in (("exponential", fit_exponential_tail), ("polynomial", fit_polynomial_tail)):
        try:
            results[name] = fit(curve, q)
            fits[name] = results[name].to_json_dict()
        except TailFitError as exc:
            fits[name] = {"error": str(exc)}
    if not results:
        raise TailFitError("neither tail model admits a fit")
    selected = max(results, key=lambda k: results[k].r_squared)
    _write_json(
        out_dir / "tail_fits.json",
        {"fits": fits, "selected_model": selected},
        meta,
    )

    domination = {"source_kind": kernel.kind}
    if kernel.kind == "standard_gaussian":
        consts = gaussian_source_tail_constants(field.dataset, 0.0, integ.t_end)
        bound = lambda u: np.minimum(1.0, consts.C_T * np.exp(-consts.c_T * u))
        exceed = float(np.mean(table.e_total >= consts.U_T))
        domination.update(
            {
                "model": "exponential",
                "constants": {
                    "c_T": consts.c_T,
                    "C_T": consts.C_T,
                    "U_T": consts.U_T,
                    "c3": consts.c3,
                },
                "threshold": consts.U_T,
                "empirical_exceedance_at_threshold": exceed,
                "bound_at_threshold": float(bound(np.asarray(consts.U_T))),
                "dominates_at_threshold": exceed
                <= float(bound(np.asarray(consts.U_T))) + dkw_radius(curve.n_samples),
            }
        )
        if curve.thresholds[0] <= consts.U_T <= curve.thresholds[-1]:
            domination["checked_range"] = [consts.U_T, float(curve.thresholds[-1])]
            domination["dominates_on_range"] = bound_domination_check(curve, bound, consts.U_T)
        else:
            domination["checked_range"] = None
            domination["dominates_on_range"] = None
            domination["range_note"] = "theorem threshold lies outside the sampled range"
    else:
        gamma = kernel.norm_tail_index / 2.0
        slope = fits.get("polynomial", {}).get("slope")
        domination.update(
            {
                "model": "polynomial",
                "gamma_expected": gamma,
                "slope": slope,
                "slope_window": 0.5,
                "within_window": (slope is not None and abs(slope + gamma) <= 0.5),
                "note": "polynomial bound constant is existence-only; the decay exponent is checked",
            }
        )
    _write_json(out_dir / "bound_domination.json", domination, meta)


def _run_gradcheck(cfg, base_dir, out_dir, meta, workers):
    field, kernel = _build_empirical_field(cfg, base_dir)
    mc = cfg["mc"]
    probe_times = mc.get("probe_times")
    if not probe_times:
        raise ConfigError("gradcheck requires mc.probe_times")
    for t in probe_times:
        if not 0.0 <= t <= field.t_max:
            raise ConfigError(f"probe time {t} outside [0, {field.t_max}]")
    probes = sample_source(kernel, mc["seed"], mc["count"])
    reports = [
        asymmetry_report(field, float(t), z).to_json_dict()
        for t in probe_times
        for z in probes
    ]
    _write_json(out_dir / "gradcheck.json", {"reports": reports}, meta)


def _run_ot_compare(cfg, base_dir, out_dir, meta, workers):
    target = _build_target(cfg, base_dir)
    gt = GaussianTransport(target)
    pop = PopulationGaussianField(target)
    integ = _build_integrator(cfg)
    mc = cfg["mc"]
    kernel = SourceKernel("standard_gaussian", dim=target.dim)
    x0 = sample_source(kernel, mc["seed"], mc["count"])
    ends = batch_endpoints(pop, x0, integ, workers=workers)
    monge = gt.monge_map(x0)
    disc = np.linalg.norm(ends - monge, axis=1)
    d = target.dim
    header = (
        ["sample_index"]
        + [f"endpoint_{k + 1}" for k in range(d)]
        + [f"monge_{k + 1}" for k in range(d)]
        + ["discrepancy"]
    )
    rows = np.concatenate([ends, monge, disc[:, None]], axis=1)
    _write_points_csv(out_dir / "ot_compare.csv", header, rows, meta)
    cost = np.linalg.norm(x0 - monge, axis=1) ** 2
    _write_json(
        out_dir / "ot_summary.json",
        {
            "count": int(mc["count"]),
            "t_end": integ.t_end,
            "w2_squared_closed_form": gt.w2_squared(),
            "w2_squared_monte_carlo": float(cost.mean()),
            "mean_discrepancy": float(disc.mean()),
            "max_discrepancy": float(disc.max()),
        },
        meta,
    )


def _run_bounds(cfg, base_dir, out_dir, meta, workers):
    dataset = _build_dataset(_section(cfg, "dataset"), base_dir)
    target = _build_target(cfg, base_dir)
    gt = GaussianTransport(target)
    spec = cfg.get("bounds", {})
    t = spec.get("t", 0.0)
    T = spec.get("T", _build_integrator(cfg).t_end)
    try:
        consts = gaussian_source_tail_constants(dataset, t, T)
    except ValueError as exc:
        raise ConfigError(f"bounds: {exc}") from None
    seed = spec.get("mc_seed", cfg["mc"]["seed"])

    mgf_cases = spec.get("mgf_cases", [[0.0, 0.25], [1.0, 0.1], [2.0, 0.3]])
    mgf_draws = spec.get("mgf_draws", 1_000_000)
    mgf_report = []
    for a, b in mgf_cases:
        formula = gaussian_mgf(a, b)
        mc_est = gaussian_mgf_monte_carlo(a, b, mgf_draws, seed)
        mgf_report.append(
            {
                "a": a,
                "b": b,
                "formula": formula,
                "monte_carlo": mc_est,
                "rel_error": abs(mc_est - formula) / formula,
            }
        )

    s = spec.get("chisq_s", 2.0)
    d_chi = spec.get("chisq_d", 16)
    chisq_draws = spec.get("chisq_draws", 1_000_000)
    bound_val = chisq_tail_bound(s, d_chi)
    emp = chisq_tail_monte_carlo(s, d_chi, chisq_draws, seed)
    _write_json(
        out_dir / "bounds.json",
        {
            "gaussian_source_constants": {
                "t": t,
                "T": T,
                "M": dataset.max_norm,
                "d": dataset.dim,
                **consts._asdict(),
            },
            "transport": {"rho": gt.rho, "C": gt.tail_C},
            "mgf_oracle": mgf_report,
            "chisq_oracle": {
                "s": s,
                "d": d_chi,
                "bound": bound_val,
                "empirical": emp,
                "dominates": emp <= bound_val,
            },
        },
        meta,
    )


_RUNNERS = {
    "sample": _run_sample,
    "energy": _run_energy,
    "tails": _run_tails,
    "gradcheck": _run_gradcheck,
    "ot-compare": _run_ot_compare,
    "bounds": _run_bounds,
}


def run(config_path, workers: int = 1, output_dir=None) -> int:
    """Execute one experiment; returns the process exit code."""
    config_path = Path(config_path)
    try:
        cfg, digest = _load_config(config_path)
        _apply_seed_override(cfg)
        base_dir = config_path.parent
        meta = {"fmkinetics": __version__, "config_sha256": digest}
        out_dir = Path(output_dir) if output_dir is not None else Path(cfg["output_dir"])
        if not out_dir.is_absolute():
            out_dir = base_dir / out_dir
        runner = _RUNNERS[cfg["experiment"]]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        runner(cfg, base_dir, out_dir, meta, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (
        IntegrationDivergedError,
        TailFitError,
        InsufficientDataError,
        FloatingPointError,
        np.linalg.LinAlgError,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fmk",
        description="Batch experiments for closed-form flow-matching samplers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run one experiment from a JSON config")
    runp.add_argument("--config", required=True, help="path to the experiment config")
    runp.add_argument("--workers", type=int, default=1, help="parallel workers (default 1)")
    runp.add_argument("--output-dir", default=None, help="override the config output_dir")
    args = parser.parse_args(argv)
    if args.workers < 1:
        print("config error: --workers must be >= 1", file=sys.stderr)
        return 2
    return run(args.config, workers=args.workers, output_dir=args.output_dir)


if __name__ == "__main__":
    sys.exit(main())
