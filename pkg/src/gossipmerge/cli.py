"""Command-line interface.

Four subcommands, each taking `--config PATH` plus `key=value` overrides:

- `run`            train agents and write metrics.csv / summary.json
- `sweep`          repeat `run` over a list of agent counts
- `verify-spectral` sample permuted averaging rounds against the baseline factor
- `align-demo`     align two checkpoints with every mode and compare merges

Every subcommand echoes its effective configuration to `config.echo` in the
output directory, so a run can be reproduced from its artifacts alone.
Exit codes: 0 ok, 1 diverged, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys

import numpy as np

from .align import (activation_match, apply_permutation, fixed_point_fraction,
                    identity_permutation, weight_match)
from .checkpoint import load_model
from .config import ExperimentConfig, format_config, parse_config
from .linalg import RngStream
from .nn import ModelParams, flatten, forward, layer_dims, loss_and_grad, unflatten
from .plots import (render_align_figure, render_run_figure,
                    render_spectral_figure, render_sweep_figure)
from .sim import (STREAM_PROBE, RunResult, load_csv_dataset, make_synthetic,
                  run_experiment)
from .topology import (SPECTRAL_SLACK, build_mixing, make_topology,
                       mixing_spectrum, verify_permuted_spectrum)

__all__ = ["main", "cmd_run", "cmd_sweep", "cmd_verify_spectral", "cmd_align_demo"]

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_USAGE = 2

# Column sets are fixed: they never depend on config values. Vector-valued
# fields are packed into one cell with ';' so the schema survives any agent
# count; non-finite metrics become empty cells, never dropped columns.
METRIC_COLUMNS = ("repeat", "seed", "iteration", "loss_mean", "agent_loss",
                  "accuracy_avg", "accuracy_aligned", "accuracy_agents",
                  "consensus", "grad_norm", "comm_rounds")
MERGE_COLUMNS = ("repeat", "seed", "round_index", "pre_consensus",
                 "post_consensus", "rounds_charged", "fixed_point_fraction")
SWEEP_COLUMNS = ("agents", "repeat", "seed", "final_grad_norm", "final_consensus",
                 "final_accuracy_avg", "comm_rounds", "diverged")


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return repr(value) if math.isfinite(value) else ""


def _pack(values) -> str:
    return ";".join(_fmt(v) for v in values)


def _write_csv(path: str, header, rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(str(cell) for cell in row) for row in rows)
    with open(path, "w", newline="") as handle:
        handle.write("\n".join(lines) + "\n")


def _json_num(value):
    value = float(value)
    return value if math.isfinite(value) else None


def _write_json(path: str, payload) -> None:
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _echo_config(cfg: ExperimentConfig) -> None:
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.echo"), "w") as handle:
        handle.write(format_config(cfg))


def _mean_std(values) -> dict:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        return {"mean": None, "std": None}
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def _require_runnable_topology(cfg: ExperimentConfig) -> None:
    if cfg.topology == "identity":
        raise ValueError("topology 'identity' is only available for verify-spectral")


def _metric_rows(result: RunResult, repeat: int, seed: int):
    for rec in result.records:
        loss_mean = float(np.mean(rec.agent_loss)) if rec.agent_loss else float("nan")
        yield (repeat, seed, rec.iteration, _fmt(loss_mean), _pack(rec.agent_loss),
               _fmt(rec.accuracy_avg), _fmt(rec.accuracy_aligned),
               _fmt(rec.accuracy_agents), _fmt(rec.consensus), _fmt(rec.grad_norm),
               _fmt(rec.comm_rounds))


def _merge_rows(result: RunResult, repeat: int, seed: int):
    for st in result.merge_stats:
        yield (repeat, seed, st.round_index, _fmt(st.pre_consensus),
               _fmt(st.post_consensus), st.rounds_charged,
               _fmt(st.fixed_point_fraction))


def cmd_run(cfg: ExperimentConfig) -> int:
    """Run the experiment `repeats` times (seeds seed..seed+repeats-1)."""
    _require_runnable_topology(cfg)
    _echo_config(cfg)
    results: list[RunResult] = []
    metric_rows: list[tuple] = []
    merge_rows: list[tuple] = []
    for repeat in range(cfg.repeats):
        run_cfg = dataclasses.replace(cfg, seed=cfg.seed + repeat)
        result = run_experiment(run_cfg)
        results.append(result)
        metric_rows.extend(_metric_rows(result, repeat, run_cfg.seed))
        merge_rows.extend(_merge_rows(result, repeat, run_cfg.seed))
    _write_csv(os.path.join(cfg.out, "metrics.csv"), METRIC_COLUMNS, metric_rows)
    _write_csv(os.path.join(cfg.out, "merges.csv"), MERGE_COLUMNS, merge_rows)

    finals = [res.records[-1] for res in results]
    spectral = mixing_spectrum(build_mixing(make_topology(cfg.topology, cfg.agents)))
    summary = {
        "agents": cfg.agents,
        "iterations": cfg.K,
        "repeats": cfg.repeats,
        "diverged": bool(any(res.diverged for res in results)),
        "final_accuracy_avg": _mean_std([f.accuracy_avg for f in finals]),
        "final_accuracy_aligned": _mean_std([f.accuracy_aligned for f in finals]),
        "final_accuracy_agents": _mean_std([f.accuracy_agents for f in finals]),
        "final_consensus": _mean_std([f.consensus for f in finals]),
        "final_grad_norm": _mean_std([f.grad_norm for f in finals]),
        "communication_rounds": {
            "per_repeat": [_json_num(f.comm_rounds) for f in finals],
            "total": _json_num(sum(f.comm_rounds for f in finals)),
        },
        "spectral": {
            "slem": _json_num(spectral.slem),
            "contraction": _json_num(spectral.contraction),
            "disconnected": spectral.disconnected,
        },
    }
    _write_json(os.path.join(cfg.out, "summary.json"), summary)
    if cfg.plots:
        render_run_figure(results[0].records, cfg.out)
    acc = summary["final_accuracy_avg"]
    print(f"run: {cfg.repeats} repeat(s), final averaged-model accuracy "
          f"mean={acc['mean']} std={acc['std']}")
    return EXIT_DIVERGED if summary["diverged"] else EXIT_OK


def cmd_sweep(cfg: ExperimentConfig) -> int:
    """Repeat the run over cfg.sweep_agents and compare final gradient norms."""
    _require_runnable_topology(cfg)
    _echo_config(cfg)
    rows: list[tuple] = []
    medians: list[float] = []
    any_diverged = False
    for n_agents in cfg.sweep_agents:
        final_gradnorms = []
        for repeat in range(cfg.repeats):
            run_cfg = dataclasses.replace(cfg, agents=n_agents, seed=cfg.seed + repeat)
            result = run_experiment(run_cfg)
            final = result.records[-1]
            any_diverged = any_diverged or result.diverged
            final_gradnorms.append(final.grad_norm)
            rows.append((n_agents, repeat, run_cfg.seed, _fmt(final.grad_norm),
                         _fmt(final.consensus), _fmt(final.accuracy_avg),
                         _fmt(final.comm_rounds), int(result.diverged)))
        medians.append(float(np.median(final_gradnorms)))
    _write_csv(os.path.join(cfg.out, "sweep.csv"), SWEEP_COLUMNS, rows)
    nonincreasing = all(b <= a + 1e-12 for a, b in zip(medians, medians[1:]))
    payload = {
        "agents": list(cfg.sweep_agents),
        "repeats": cfg.repeats,
        "median_final_grad_norm": [_json_num(m) for m in medians],
        "nonincreasing": nonincreasing,
        "diverged": any_diverged,
    }
    _write_json(os.path.join(cfg.out, "sweep.json"), payload)
    if cfg.plots:
        render_sweep_figure(cfg.sweep_agents, medians, cfg.out)
    trend = "nonincreasing" if nonincreasing else "NOT nonincreasing"
    print(f"sweep: agents {list(cfg.sweep_agents)} -> median final gradient "
          f"norms {medians} ({trend})")
    return EXIT_DIVERGED if any_diverged else EXIT_OK


def cmd_verify_spectral(cfg: ExperimentConfig) -> int:
    """Check that permuted averaging rounds contract no slower than plain ones."""
    if cfg.topology == "identity":
        report = mixing_spectrum(np.eye(cfg.agents))
        verdict = "skipped (topology is disconnected)"
    else:
        pi = build_mixing(make_topology(cfg.topology, cfg.agents))
        report = verify_permuted_spectrum(pi, cfg.model_dim, cfg.trials,
                                          RngStream(cfg.seed))
        held = sum(1 for s in report.permuted_factor_samples
                   if s <= report.slem + SPECTRAL_SLACK)
        verdict = f"rho' <= rho holds in {held}/{report.trials} trials"
    _echo_config(cfg)
    payload = {
        "topology": cfg.topology,
        "agents": cfg.agents,
        "model_dim": cfg.model_dim,
        "slem": _json_num(report.slem),
        "contraction": _json_num(report.contraction),
        "disconnected": report.disconnected,
        "trials": report.trials,
        "permuted_factor_max": (None if report.permuted_factor_max is None
                                else _json_num(report.permuted_factor_max)),
        "permuted_factor_samples": [_json_num(s) for s in report.permuted_factor_samples],
        "bound_holds": report.bound_holds,
        "verdict": verdict,
    }
    _write_json(os.path.join(cfg.out, "spectral.json"), payload)
    _write_csv(os.path.join(cfg.out, "spectral.csv"), ("trial", "permuted_factor"),
               [(i, _fmt(s)) for i, s in enumerate(report.permuted_factor_samples)])
    if cfg.plots:
        render_spectral_figure(report, cfg.out)
    print(f"verify-spectral: topology={cfg.topology} agents={cfg.agents} "
          f"slem={report.slem:.9f} verdict: {verdict}")
    return EXIT_OK


def _average(a: ModelParams, b: ModelParams) -> ModelParams:
    dims = layer_dims(a)
    return unflatten(0.5 * (flatten(a) + flatten(b)), dims, activation=a.activation)


def cmd_align_demo(cfg: ExperimentConfig) -> int:
    """Align checkpoint model_b to model_a under every mode and merge them."""
    if not cfg.model_a or not cfg.model_b:
        raise ValueError("align-demo requires model_a=PATH and model_b=PATH")
    model_a = load_model(cfg.model_a)
    model_b = load_model(cfg.model_b)
    dims = layer_dims(model_a)
    if dims != layer_dims(model_b):
        raise ValueError(f"architecture mismatch: {dims} vs {layer_dims(model_b)}")
    n_in, n_out = dims[0], dims[-1]
    _echo_config(cfg)
    # The probe must come from the distribution the checkpoints were trained
    # on for the losses to mean anything; data_csv is the way to supply it.
    if cfg.data_csv:
        probe = load_csv_dataset(cfg.data_csv)
        if probe.dims != n_in or probe.num_classes > n_out:
            raise ValueError(
                f"probe data has {probe.dims} features and {probe.num_classes} "
                f"classes, model expects {n_in} features and at most {n_out} classes")
    else:
        if n_in < n_out:
            raise ValueError("probe generation needs input dim >= output classes")
        per_class = max(1, math.ceil(cfg.matching_batch / n_out))
        probe = make_synthetic(n_out, n_in, per_class, cfg.separation,
                               RngStream(cfg.seed).derive(STREAM_PROBE))
    if cfg.loss == "mse":
        targets = np.zeros((probe.samples, n_out))
        targets[np.arange(probe.samples), probe.labels] = 1.0
    else:
        targets = probe.labels

    def probe_loss(model: ModelParams) -> float:
        return float(loss_and_grad(model, probe.features, targets, cfg.loss)[0])

    def match(mode: str, reference: ModelParams, candidate: ModelParams):
        if mode == "identity":
            return identity_permutation(list(dims[1:-1]))
        if mode == "weight_match":
            return weight_match(reference, candidate, max_sweeps=cfg.max_sweeps)
        _, trace_ref = forward(reference, probe.features)
        _, trace_cand = forward(candidate, probe.features)
        return activation_match(trace_ref, trace_cand, stat=cfg.match_stat)

    plain_loss = probe_loss(_average(model_a, model_b))
    modes = {}
    mode_losses = {}
    for mode in ("activation_match", "weight_match", "identity"):
        lp = match(mode, model_a, model_b)
        aligned_b = apply_permutation(model_b, lp)
        composite = match(mode, model_a, aligned_b)
        merged_loss = probe_loss(_average(model_a, aligned_b))
        modes[mode] = {
            "permutation": [list(map(int, p)) for p in lp.perms],
            "fixed_point_fraction": fixed_point_fraction(lp),
            "composite_fixed_point_fraction": fixed_point_fraction(composite),
            "plain_average_loss": _json_num(plain_loss),
            "merged_loss": _json_num(merged_loss),
        }
        mode_losses[mode] = (plain_loss, merged_loss)
    payload = {
        "architecture": list(dims),
        "probe_samples": probe.samples,
        "loss": cfg.loss,
        "loss_a": _json_num(probe_loss(model_a)),
        "loss_b": _json_num(probe_loss(model_b)),
        "modes": modes,
    }
    _write_json(os.path.join(cfg.out, "align.json"), payload)
    if cfg.plots:
        render_align_figure(mode_losses, cfg.out)
    for mode, entry in modes.items():
        print(f"align-demo: {mode}: fixed-point {entry['fixed_point_fraction']:.3f} "
              f"merged loss {entry['merged_loss']}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "verify-spectral": cmd_verify_spectral,
    "align-demo": cmd_align_demo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gossipmerge",
        description="Decentralized merge-and-train simulator for small MLPs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        cmd = sub.add_parser(name, help=func.__doc__)
        cmd.add_argument("--config", default=None,
                         help="plain key=value config file (one pair per line)")
        cmd.add_argument("overrides", nargs="*", metavar="key=value",
                         help="inline overrides applied after the file")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = parse_config(args.config, tuple(args.overrides))
        return COMMANDS[args.command](cfg)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
