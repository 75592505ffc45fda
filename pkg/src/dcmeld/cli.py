"""Config-driven experiment runner.

Subcommands:

  dcmeld run <config.toml> [-o OUTDIR]     build the model, run the chosen
                                           sampler, write samples/summary/
                                           diagnostics/manifest
  dcmeld summarize <samples.csv>           print the summary table for a
                                           samples file
  dcmeld simulate-owl <truth.toml> OUTDIR  write synthetic owl CSVs + truth
  dcmeld validate <config.toml>            check a config without running

Configs are TOML; see README for the full grammar.  Runs are
deterministic for a fixed (config, seed, worker count); the environment
variable DCMELD_THREADS overrides the configured worker count.

Exit codes: 0 ok, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .baselines import (
    SubposteriorPool,
    full_posterior_mcmc,
    pointwise_plugin_sampler,
    two_stage_parallel_sampler,
)
from .dc import MergeConfig, dc_melding_multi, run_stage_one
from .melding import ChainMeldedModel
from .models.gaussian_chain import default_gaussian_chain, gaussian_chain_build
from .models.owl import OwlTruth, load_owl_data, owl_build, simulate_owl_data, write_owl_data
from .particles import ResampleScheme, WeightedParticleSystem
from .smc import MoveKernelConfig, TemperingSchedule
from .summary import summarize_system, summary_rows

__all__ = ["main", "run_experiment", "load_config", "ConfigError"]


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


# ---------------------------------------------------------------------------
# Config handling

_DEFAULTS = {
    "run": {
        "model": None,
        "sampler": None,
        "particles": 1024,
        "seed": None,
        "workers": 2,
        "output_dir": "dcmeld-out",
        "save_ledger": False,
    },
    "pooling": {"lambda": None},
    "model.gaussian_chain": {"M": 3, "n_obs": 12, "data_seed": 0, "noise_sd": 0.8},
    "model.owl": {"data_dir": None, "simulate_seed": None, "T": 25, "releases": 40},
    "schedule": {"mode": "adaptive", "target_cess": 0.9, "ladder": [], "max_steps": 1000},
    "kernel": {"n_mcmc_iters": 10, "discrete_block_size": 8},
    "merge": {"mode": "naive", "alpha_star": 0.5, "oversample": 3, "mu_strategy": "prior_mean"},
    "resample": {"kind": "systematic", "trigger": 0.5},
    "mcmc": {"iters": 100000, "chains": 2, "burn_in": 0.2},
    "plugin": {"statistic": "mean", "stage_one_particles": 2048},
}

_MODELS = ("gaussian_chain", "owl")
_SAMPLERS = ("dc_melding", "two_stage_parallel", "full_mcmc", "pointwise_plugin")


def _get_section(raw: dict, dotted: str) -> dict:
    node = raw
    for part in dotted.split("."):
        node = node.get(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"section [{dotted}] must be a table")
    return node


def load_config(path) -> dict:
    """Parse and validate a TOML config; returns the resolved config dict."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc

    resolved: dict = {}
    for dotted, defaults in _DEFAULTS.items():
        section = _get_section(raw, dotted)
        merged = dict(defaults)
        for key, value in section.items():
            if key not in defaults:
                raise ConfigError(f"unknown field '{key}' in section [{dotted}]")
            merged[key] = value
        resolved[dotted] = merged

    run = resolved["run"]
    if run["model"] not in _MODELS:
        raise ConfigError(f"run.model must be one of {_MODELS}, got {run['model']!r}")
    if run["sampler"] not in _SAMPLERS:
        raise ConfigError(f"run.sampler must be one of {_SAMPLERS}, got {run['sampler']!r}")
    if run["seed"] is None or not isinstance(run["seed"], int):
        raise ConfigError("run.seed is mandatory and must be an integer")
    if not (isinstance(run["particles"], int) and run["particles"] >= 8):
        raise ConfigError("run.particles must be an integer >= 8")
    if not (isinstance(run["workers"], int) and run["workers"] >= 1):
        raise ConfigError("run.workers must be a positive integer")

    M = 3 if run["model"] == "owl" else int(resolved["model.gaussian_chain"]["M"])
    lam = resolved["pooling"]["lambda"]
    if lam is None:
        lam = [0.5] * M if run["model"] == "owl" else [1.0] * M
        resolved["pooling"]["lambda"] = lam
    if len(lam) != M:
        raise ConfigError(
            f"pooling.lambda must have length M={M}, got length {len(lam)}"
        )
    if any(v < 0 for v in lam):
        raise ConfigError("pooling.lambda entries must be nonnegative")

    sched = resolved["schedule"]
    if sched["mode"] not in ("adaptive", "fixed"):
        raise ConfigError("schedule.mode must be 'adaptive' or 'fixed'")
    if sched["mode"] == "fixed" and not sched["ladder"]:
        raise ConfigError("schedule.mode='fixed' requires schedule.ladder")
    if not (0.0 < float(sched["target_cess"]) < 1.0):
        raise ConfigError("schedule.target_cess must lie in (0, 1)")
    merge = resolved["merge"]
    if merge["mode"] not in ("naive", "extended"):
        raise ConfigError("merge.mode must be 'naive' or 'extended'")
    if not (0.0 <= float(merge["alpha_star"]) <= 1.0):
        raise ConfigError("merge.alpha_star must lie in [0, 1]")
    res = resolved["resample"]
    if res["kind"] not in ("systematic", "multinomial"):
        raise ConfigError("resample.kind must be 'systematic' or 'multinomial'")
    if not (0.0 < float(res["trigger"]) <= 1.0):
        raise ConfigError("resample.trigger must lie in (0, 1]")
    mcmc = resolved["mcmc"]
    if not (isinstance(mcmc["iters"], int) and mcmc["iters"] > 0):
        raise ConfigError("mcmc.iters must be a positive integer")
    if not (0.0 <= float(mcmc["burn_in"]) < 1.0):
        raise ConfigError("mcmc.burn_in must lie in [0, 1)")
    if resolved["plugin"]["statistic"] not in ("mean", "median"):
        raise ConfigError("plugin.statistic must be 'mean' or 'median'")
    if run["model"] == "owl" and run["sampler"] in ("dc_melding",) + _SAMPLERS[1:]:
        owl = resolved["model.owl"]
        if owl["data_dir"] is None and owl["simulate_seed"] is None:
            raise ConfigError(
                "model.owl needs either data_dir or simulate_seed"
            )
    return resolved


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Builders

def build_model(config: dict) -> ChainMeldedModel:
    lam = tuple(float(v) for v in config["pooling"]["lambda"])
    if config["run"]["model"] == "gaussian_chain":
        g = config["model.gaussian_chain"]
        spec = default_gaussian_chain(
            M=int(g["M"]), n_obs=int(g["n_obs"]), seed=int(g["data_seed"]),
            noise_sd=float(g["noise_sd"]),
        )
        return gaussian_chain_build(spec, lam=lam)
    owl = config["model.owl"]
    if owl["data_dir"] is not None:
        data = load_owl_data(owl["data_dir"])
    else:
        data = simulate_owl_data(
            OwlTruth(), seed=int(owl["simulate_seed"]), T=int(owl["T"]),
            releases=int(owl["releases"]),
        )
    return owl_build(data, lam=lam)


def _schedule(config: dict) -> TemperingSchedule:
    s = config["schedule"]
    if s["mode"] == "fixed":
        return TemperingSchedule.fixed(tuple(float(a) for a in s["ladder"]))
    return TemperingSchedule.adaptive(float(s["target_cess"]), int(s["max_steps"]))


def _kernel(config: dict) -> MoveKernelConfig:
    k = config["kernel"]
    return MoveKernelConfig(
        n_mcmc_iters=int(k["n_mcmc_iters"]),
        discrete_block_size=int(k["discrete_block_size"]),
    )


def _merge(config: dict) -> MergeConfig:
    m = config["merge"]
    return MergeConfig(
        mode=m["mode"], alpha_star=float(m["alpha_star"]),
        oversample=int(m["oversample"]), mu_strategy=m["mu_strategy"],
    )


def _resample(config: dict) -> ResampleScheme:
    r = config["resample"]
    return ResampleScheme(kind=r["kind"], trigger=float(r["trigger"]))


# ---------------------------------------------------------------------------
# Running

def _stage_one_pool(model, config, workers) -> tuple[SubposteriorPool, dict]:
    records = run_stage_one(
        model, (1, model.M), int(config["plugin"]["stage_one_particles"]),
        _schedule(config), _kernel(config), int(config["run"]["seed"]),
        resample_scheme=_resample(config), workers=workers,
    )
    return (
        SubposteriorPool(left=records[1].system, right=records[model.M].system),
        {f"stage1-leaf{m}": rec.diagnostics for m, rec in records.items()},
    )


def run_experiment(config: dict, output_dir=None) -> dict:
    """Run the configured experiment; returns a manifest-style dict.

    Writes samples.csv, summary.csv, diagnostics.csv, manifest.json and
    timings.json into the output directory.  All files except
    timings.json are byte-identical across repeated runs with the same
    config, seed, and worker count.
    """
    t_start = time.perf_counter()
    run = config["run"]
    workers = int(os.environ.get("DCMELD_THREADS", run["workers"]))
    out = Path(output_dir if output_dir is not None else run["output_dir"])
    out.mkdir(parents=True, exist_ok=True)

    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    model = build_model(config)
    timings["build_model_s"] = time.perf_counter() - t0

    seed = int(run["seed"])
    sampler = run["sampler"]
    diag_tables: dict[str, object] = {}
    stage_summary: list = []
    t0 = time.perf_counter()
    if sampler == "dc_melding":
        result = dc_melding_multi(
            model, int(run["particles"]), _schedule(config), _kernel(config),
            _merge(config), seed, resample_scheme=_resample(config), workers=workers,
        )
        samples = result.samples
        diag_tables.update(result.diagnostics)
        stage_summary = [
            {"stage": st.index, "tasks": [t.key for t in st.tasks]}
            for st in result.ledger.plan.stages
        ]
        if run["save_ledger"]:
            result.ledger.save(out / "ledger")
    elif sampler == "two_stage_parallel":
        if model.M != 3:
            raise ConfigError("two_stage_parallel requires a three-submodel model")
        pool, diag = _stage_one_pool(model, config, workers)
        diag_tables.update(diag)
        samples = two_stage_parallel_sampler(
            model, pool, int(config["mcmc"]["iters"]), seed,
            burn_in=float(config["mcmc"]["burn_in"]),
        )
    elif sampler == "full_mcmc":
        samples, info = full_posterior_mcmc(
            model, int(config["mcmc"]["iters"]), seed,
            n_chains=int(config["mcmc"]["chains"]),
            burn_in=float(config["mcmc"]["burn_in"]),
        )
        diag_tables["mcmc_acceptance"] = info["acceptance"]
    elif sampler == "pointwise_plugin":
        if model.M != 3:
            raise ConfigError("pointwise_plugin requires a three-submodel model")
        pool, diag = _stage_one_pool(model, config, workers)
        diag_tables.update(diag)
        stat = config["plugin"]["statistic"]
        b1 = model.block_dim(1)
        if stat == "mean":
            left = pool.left.values[:, :b1].mean(axis=0)
            right = pool.right.values[:, : model.block_dim(2)].mean(axis=0)
        else:
            left = np.median(pool.left.values[:, :b1], axis=0)
            right = np.median(pool.right.values[:, : model.block_dim(2)], axis=0)
        plugin_phi = np.concatenate([left, right])
        samples, info = pointwise_plugin_sampler(
            model, plugin_phi, int(config["mcmc"]["iters"]), seed,
            n_chains=int(config["mcmc"]["chains"]),
            burn_in=float(config["mcmc"]["burn_in"]),
        )
        diag_tables["mcmc_acceptance"] = info["acceptance"]
    else:  # pragma: no cover - guarded by validation
        raise ConfigError(f"unknown sampler {sampler!r}")
    timings["sampler_s"] = time.perf_counter() - t0

    samples_path = out / "samples.csv"
    samples.to_csv(samples_path)

    rows = summarize_system(samples)
    summary_path = out / "summary.csv"
    with open(summary_path, "w") as fh:
        fh.write("parameter,statistic,value\n")
        for name, stat, value in summary_rows(rows):
            fh.write(f"{name},{stat},{value!r}\n")

    diagnostics_path = out / "diagnostics.csv"
    with open(diagnostics_path, "w") as fh:
        fh.write("source,alpha,ess,acceptance,resampled\n")
        for key in sorted(diag_tables):
            table = diag_tables[key]
            if hasattr(table, "to_rows"):
                for a, e, acc, r in table.to_rows():
                    fh.write(f"{key},{a!r},{e!r},{acc!r},{int(r)}\n")
            else:
                for block, rate in sorted(table.items()):
                    fh.write(f"{key}/{block},,,{rate!r},\n")

    manifest = {
        "library": "dcmeld",
        "version": __version__,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "sampler": sampler,
        "workers_configured": workers,
        "stages": stage_summary,
        "files": {
            "samples": samples_path.name,
            "summary": summary_path.name,
            "diagnostics": diagnostics_path.name,
        },
        "n_samples": samples.n,
        "parameters": list(samples.labels),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    timings["total_s"] = time.perf_counter() - t_start
    with open(out / "timings.json", "w") as fh:
        json.dump(timings, fh, indent=2, sort_keys=True)
    return manifest


# ---------------------------------------------------------------------------
# Entry point

def _cmd_run(args) -> int:
    config = load_config(args.config)
    manifest = run_experiment(config, output_dir=args.output)
    out = Path(args.output if args.output else config["run"]["output_dir"])
    print(f"wrote {manifest['n_samples']} samples to {out / 'samples.csv'}")
    return 0


def _cmd_summarize(args) -> int:
    system = WeightedParticleSystem.from_csv(args.samples)
    rows = summarize_system(system)
    header = f"{'parameter':<16}{'mean':>12}{'sd':>12}{'q2.5':>12}{'q50':>12}{'q97.5':>12}{'ess':>10}"
    print(header)
    for row in rows:
        print(
            f"{row['parameter']:<16}{row['mean']:>12.5g}{row['sd']:>12.5g}"
            f"{row['q2.5']:>12.5g}{row['q50']:>12.5g}{row['q97.5']:>12.5g}"
            f"{row['ess']:>10.1f}"
        )
    return 0


def _cmd_simulate_owl(args) -> int:
    try:
        with open(args.truth_config, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"truth config not found: {args.truth_config}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"truth config is not valid TOML: {exc}") from exc
    section = raw.get("truth", {})
    known = {f for f in OwlTruth.__dataclass_fields__}
    for key in section:
        if key not in known:
            raise ConfigError(f"unknown field '{key}' in section [truth]")
    truth = OwlTruth(**section)
    seed = raw.get("seed", 0)
    T = raw.get("T", 25)
    releases = raw.get("releases", 40)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    data = simulate_owl_data(truth, seed=seed, T=T, releases=releases)
    write_owl_data(data, args.outdir, truth=truth)
    print(f"wrote synthetic data for T={T} to {args.outdir}")
    return 0


def _cmd_validate(args) -> int:
    load_config(args.config)
    print("config ok")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dcmeld", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output", default=None, help="output directory")
    p_run.set_defaults(func=_cmd_run)

    p_sum = sub.add_parser("summarize", help="summarize a samples CSV")
    p_sum.add_argument("samples")
    p_sum.set_defaults(func=_cmd_summarize)

    p_sim = sub.add_parser("simulate-owl", help="write synthetic owl data")
    p_sim.add_argument("truth_config")
    p_sim.add_argument("outdir")
    p_sim.set_defaults(func=_cmd_simulate_owl)

    p_val = sub.add_parser("validate", help="validate a config file")
    p_val.add_argument("config")
    p_val.set_defaults(func=_cmd_validate)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
