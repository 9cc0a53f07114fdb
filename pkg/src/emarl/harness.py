"""Experiment orchestration: resolved experiment specs, multi-seed execution
with per-seed failure isolation, the overall win-rate summary statistic, and
CSV/JSON artifact emission."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .embedding import EmbeddingConfig
from .env import ACTIONS, GridworldConfig
from .incentive import IncentiveConfig
from .marl import AgentNet, TrainConfig, evaluate, make_mixer, train_run
from .memory import compute_delta

CSV_COLUMNS = ("seed", "env_steps", "test_win_rate", "mean_test_return",
               "mean_rp", "buffer_size", "embedder_loss", "wall_clock_s")
_INT_COLUMNS = {"seed", "env_steps", "buffer_size"}

ENV_NAMES = ("gridworld",)


@dataclass(frozen=True)
class ExperimentSpec:
    env: str = "gridworld"
    env_cfg: GridworldConfig = field(default_factory=GridworldConfig)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    emb_cfg: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    inc_cfg: IncentiveConfig = field(default_factory=IncentiveConfig)
    seeds: tuple[int, ...] = (0,)
    capacity: int = 100_000
    delta: float | str = "auto"
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.env not in ENV_NAMES:
            raise ValueError(f"unknown env {self.env!r}")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")
        if (self.train_cfg.total_steps > 0
                and self.train_cfg.eval_interval > self.train_cfg.total_steps):
            raise ValueError("eval_interval must not exceed total_steps")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if isinstance(self.delta, str):
            if self.delta != "auto":
                raise ValueError("delta must be a float or 'auto'")
        elif not self.delta > 0:
            raise ValueError("delta must be positive")

    def resolved_delta(self) -> float:
        if self.delta == "auto":
            return compute_delta(self.capacity, self.emb_cfg.embed_dim)
        return float(self.delta)


def overall_winrate(steps, curves, horizon) -> float:
    """Time-normalized average win-rate: mean over seeds of the trapezoid
    integral of each curve over [0, horizon], divided by the horizon. A
    horizon between grid points truncates the last segment by linear
    interpolation."""
    steps = np.asarray(steps, dtype=np.float64)
    curves = np.atleast_2d(np.asarray(curves, dtype=np.float64))
    if steps.size == 0 or curves.size == 0:
        raise ValueError("empty curves")
    if curves.shape[1] != steps.size:
        raise ValueError("curves and eval grid disagree in length")
    if np.any(np.diff(steps) <= 0):
        raise ValueError("eval grid must be strictly increasing")
    if not 0 < horizon <= steps[-1]:
        raise ValueError("horizon must lie in (0, last eval point]")
    if steps[0] > 0:
        raise ValueError("eval grid must start at 0")
    keep = steps < horizon
    xs = np.concatenate([steps[keep], [horizon]])
    total = 0.0
    for f in curves:
        ys = np.concatenate([f[keep], [np.interp(horizon, steps, f)]])
        total += np.trapezoid(ys, xs)
    return float(total / (horizon * curves.shape[0]))


def format_value(column: str, value) -> str:
    if column in _INT_COLUMNS:
        return str(int(value))
    return f"{float(value):.9g}"


def write_metrics_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([format_value(c, row[c]) for c in CSV_COLUMNS])


def read_metrics_csv(path: str) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics header in {path}")
        for raw in reader:
            rows.append({c: (int(raw[c]) if c in _INT_COLUMNS
                             else float(raw[c])) for c in CSV_COLUMNS})
    return rows


def curves_by_seed(rows: list[dict]):
    """Group rows into per-seed win-rate curves on a shared eval grid."""
    by_seed: dict[int, list[dict]] = {}
    for row in rows:
        by_seed.setdefault(row["seed"], []).append(row)
    grids = []
    curves = []
    seeds = sorted(by_seed)
    for seed in seeds:
        seed_rows = by_seed[seed]
        steps = np.array([r["env_steps"] for r in seed_rows], dtype=np.float64)
        if np.any(np.diff(steps) <= 0):
            raise ValueError(f"seed {seed}: env_steps not strictly increasing")
        grids.append(steps)
        curves.append(np.array([r["test_win_rate"] for r in seed_rows]))
    for g in grids[1:]:
        if not np.array_equal(g, grids[0]):
            raise ValueError("seeds disagree on the eval grid")
    return seeds, grids[0] if grids else np.array([]), np.array(curves)


def spec_to_dict(spec: ExperimentSpec) -> dict:
    return {
        "env": spec.env,
        "env_cfg": asdict(spec.env_cfg),
        "train_cfg": asdict(spec.train_cfg),
        "emb_cfg": asdict(spec.emb_cfg),
        "inc_cfg": asdict(spec.inc_cfg),
        "seeds": list(spec.seeds),
        "capacity": spec.capacity,
        "delta": spec.delta,
        "delta_resolved": spec.resolved_delta(),
        "out_dir": spec.out_dir,
    }


def save_checkpoint(path: str, net: AgentNet, mixer) -> None:
    params = nn.collect_params(net.modules() + mixer.modules())
    np.savez(path, **{f"p{i}": p for i, p in enumerate(params)})


def load_checkpoint(path: str, env_cfg: GridworldConfig, mixer_kind: str):
    rng = np.random.default_rng(0)
    net = AgentNet(env_cfg.obs_dim, env_cfg.n_agents, len(ACTIONS), rng)
    mixer = make_mixer(mixer_kind, env_cfg.state_dim, env_cfg.n_agents, rng)
    params = nn.collect_params(net.modules() + mixer.modules())
    with np.load(path) as data:
        for i, p in enumerate(params):
            stored = data[f"p{i}"]
            if stored.shape != p.shape:
                raise ValueError(f"checkpoint shape mismatch at p{i}")
            p[:] = stored
    return net, mixer


def summarize(rows: list[dict]) -> dict:
    """Final win-rate mean/std over seeds plus the overall win-rate at every
    nonzero eval point. Pure function of the metrics rows; std is the
    population standard deviation."""
    if not rows:
        return {"final_win_rate": None, "mu_w": {}}
    seeds, steps, curves = curves_by_seed(rows)
    finals = curves[:, -1]
    mu_w = {}
    for horizon in steps[steps > 0]:
        mu_w[str(int(horizon))] = overall_winrate(steps, curves, horizon)
    return {
        "final_win_rate": {"mean": float(np.mean(finals)),
                           "std": float(np.std(finals))},
        "mu_w": mu_w,
    }


def run_experiment(spec: ExperimentSpec) -> dict:
    """Execute every seed, merge per-seed metrics, and write metrics.csv,
    summary.json, and config.json into the output directory. A seed that
    raises is recorded and skipped; the rest continue."""
    os.makedirs(spec.out_dir, exist_ok=True)
    delta = spec.resolved_delta()
    failures: dict[int, str] = {}
    all_rows: list[dict] = []
    seed_files = []
    for seed in spec.seeds:
        try:
            result = train_run(spec.env_cfg, spec.train_cfg, spec.emb_cfg,
                               spec.inc_cfg, capacity=spec.capacity,
                               delta=delta, seed=seed)
        except Exception as exc:  # noqa: BLE001 - seed isolation
            failures[seed] = f"{type(exc).__name__}: {exc}"
            continue
        rows = [{"seed": seed, **m} for m in result["metrics"]]
        seed_path = os.path.join(spec.out_dir, f"metrics_seed{seed}.csv")
        write_metrics_csv(seed_path, rows)
        seed_files.append(seed_path)
        save_checkpoint(os.path.join(spec.out_dir, f"checkpoint_seed{seed}.npz"),
                        result["net"], result["mixer"])
        if result["memory"] is not None:
            result["memory"].save(
                os.path.join(spec.out_dir, f"memory_seed{seed}.npz"))
        all_rows.extend(rows)

    # single-threaded merge of the seed-private files
    merged = []
    for path in seed_files:
        merged.extend(read_metrics_csv(path))
    write_metrics_csv(os.path.join(spec.out_dir, "metrics.csv"), merged)
    summary = summarize(merged)
    summary["n_seeds"] = len(spec.seeds) - len(failures)
    with open(os.path.join(spec.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    with open(os.path.join(spec.out_dir, "config.json"), "w") as fh:
        json.dump(spec_to_dict(spec), fh, indent=2)
    if failures:
        with open(os.path.join(spec.out_dir, "failures.json"), "w") as fh:
            json.dump({str(k): v for k, v in failures.items()}, fh, indent=2)
    return {
        "rows": merged,
        "summary": summary,
        "failures": failures,
        "all_failed": len(failures) == len(spec.seeds),
    }


def compare_runs(run_dirs: list[str], horizon: float | None = None) -> list[dict]:
    """Rank runs by overall win-rate at the horizon (default: end of the
    shared eval grid). Ties keep input order; differing grids are an error."""
    if len(run_dirs) < 2:
        raise ValueError("need at least two run directories")
    loaded = []
    for d in run_dirs:
        rows = read_metrics_csv(os.path.join(d, "metrics.csv"))
        if not rows:
            raise ValueError(f"{d}: empty metrics")
        _, steps, curves = curves_by_seed(rows)
        loaded.append((d, steps, curves))
    base = loaded[0][1]
    for d, steps, _ in loaded[1:]:
        if not np.array_equal(steps, base):
            raise ValueError(f"eval grid of {d} does not match {run_dirs[0]}")
    if horizon is None:
        horizon = float(base[-1])
    report = []
    for d, steps, curves in loaded:
        report.append({
            "run": d,
            "mu_w": overall_winrate(steps, curves, horizon),
            "final_win_rate": float(np.mean(curves[:, -1])),
        })
    report.sort(key=lambda r: -r["mu_w"])
    return report


def eval_checkpoint(run_dir: str, seed: int | None = None,
                    episodes: int = 30, eval_seed: int = 0):
    """Greedy evaluation of a stored checkpoint: (win_rate, mean_return)."""
    with open(os.path.join(run_dir, "config.json")) as fh:
        cfg = json.load(fh)
    env_kwargs = dict(cfg["env_cfg"])
    env_kwargs["starts"] = tuple(tuple(p) for p in env_kwargs["starts"])
    env_kwargs["goals"] = tuple(tuple(p) for p in env_kwargs["goals"])
    env_cfg = GridworldConfig(**env_kwargs)
    if seed is None:
        seed = cfg["seeds"][0]
    ckpt = os.path.join(run_dir, f"checkpoint_seed{seed}.npz")
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"no checkpoint for seed {seed} in {run_dir}")
    net, _ = load_checkpoint(ckpt, env_cfg, cfg["train_cfg"]["mixer"])
    rng = np.random.default_rng(eval_seed)
    return evaluate(env_cfg, net, rng, episodes,
                    cfg["train_cfg"]["return_threshold"])
