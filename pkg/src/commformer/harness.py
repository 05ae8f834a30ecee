"""Run drivers: training with metrics/snapshot streaming, greedy evaluation,
ablation sweeps, and plot-data export."""

from __future__ import annotations

import csv
import json
import os
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_container, restore_trainer, save_container, trainer_state
from .config import ConfigError, RunConfig, parse_config, serialize_config
from .envs import EnvSpec, GridEnv
from .graph import AdjacencyParams, CommGraph, infer_graph
from .model import CommFormerModel
from .training import Trainer

__all__ = [
    "apply_env_settings",
    "build_trainer",
    "run_train",
    "evaluate_policy",
    "run_eval",
    "run_ablate",
    "parse_sweep",
    "run_export",
]


def apply_env_settings() -> None:
    """Honor COMMFORMER_THREADS and COMMFORMER_DETERMINISTIC."""
    if os.environ.get("COMMFORMER_DETERMINISTIC") == "1":
        torch.set_num_threads(1)
        return
    threads = os.environ.get("COMMFORMER_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))


def build_trainer(cfg: RunConfig) -> Trainer:
    return Trainer(
        spec=cfg.env_spec(),
        model_cfg=cfg.model_config(),
        train_cfg=cfg.train_config(),
        mode=cfg.mode,
        graph_seed=cfg.graph_seed,
    )


def _save_checkpoint(trainer: Trainer, cfg: RunConfig, path: Path) -> None:
    tensors, meta = trainer_state(trainer)
    meta["config"] = serialize_config(cfg)
    save_container(path, tensors, meta)


def run_train(cfg: RunConfig, out_dir: str | Path) -> Trainer:
    """Train per config, streaming metrics and adjacency snapshots to
    out_dir; saves a final checkpoint (plus periodic ones if configured)."""
    apply_env_settings()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg))
    log_every = int(cfg["run.log_interval"])
    snap_every = int(cfg["run.snapshot_interval"])
    ckpt_every = int(cfg["run.checkpoint_interval"])
    trainer = build_trainer(cfg)
    with open(out / "metrics.jsonl", "w") as metrics_f, open(
        out / "snapshots.jsonl", "w"
    ) as snaps_f:

        def callback(tr: Trainer, metrics) -> None:
            if log_every and tr.iteration % log_every == 0:
                metrics_f.write(json.dumps(asdict(metrics), sort_keys=True) + "\n")
            if snap_every and tr.iteration % snap_every == 0:
                record = {
                    "step": tr.env_steps,
                    "alpha": [[float(x) for x in row] for row in tr.alpha.detach().tolist()],
                    "edges": [[int(x) for x in row] for row in tr.current_graph().edges.tolist()],
                }
                snaps_f.write(json.dumps(record, sort_keys=True) + "\n")
            if ckpt_every and tr.iteration % ckpt_every == 0:
                _save_checkpoint(tr, cfg, out / f"checkpoint_{tr.iteration:06d}.ckpt")

        trainer.train(callback)
    _save_checkpoint(trainer, cfg, out / "final.ckpt")
    return trainer


def evaluate_policy(
    model: CommFormerModel,
    graph: CommGraph,
    spec: EnvSpec,
    episodes: int,
    seed: int,
    policy: str = "greedy",
    batch: int = 256,
) -> dict:
    """Batched deterministic evaluation with the inferred graph.

    policy="greedy" takes argmax actions; policy="random" samples uniformly
    over each agent's action space (baseline measurements)."""
    if policy not in ("greedy", "random"):
        raise ValueError(f"policy must be 'greedy' or 'random', got {policy!r}")
    seeds = np.random.SeedSequence(seed).generate_state(episodes)
    rng = np.random.default_rng(seed + 1)
    returns, steps, successes = [], [], []
    for start in range(0, episodes, batch):
        envs = [GridEnv(spec, int(s)) for s in seeds[start : start + batch]]
        obs = np.stack([env.reset() for env in envs])
        active = list(range(len(envs)))
        ep_return = np.zeros(len(envs))
        ep_steps = np.zeros(len(envs), dtype=int)
        ep_success = np.zeros(len(envs), dtype=bool)
        while active:
            if policy == "greedy":
                with torch.no_grad():
                    seq = model.act(torch.from_numpy(obs[active]), graph, mode="greedy")
                acts = seq.actions.numpy()
            else:
                acts = np.stack(
                    [rng.integers(0, spec.action_dims, size=spec.n_agents) for _ in active]
                )
            still = []
            for row, e in enumerate(active):
                o, r, d, info = envs[e].step(acts[row])
                ep_return[e] += r
                ep_steps[e] = info["steps"]
                obs[e] = o
                if d:
                    ep_success[e] = info["success"]
                else:
                    still.append(e)
            active = still
        returns.extend(ep_return.tolist())
        steps.extend(ep_steps.tolist())
        successes.extend(ep_success.tolist())
    returns_arr = np.asarray(returns)
    steps_arr = np.asarray(steps, dtype=float)
    n = len(returns_arr)
    return {
        "episodes": n,
        "success_rate": float(np.mean(successes)),
        "mean_steps": float(steps_arr.mean()),
        "std_steps": float(steps_arr.std(ddof=1)) if n > 1 else 0.0,
        "mean_return": float(returns_arr.mean()),
        "std": float(returns_arr.std(ddof=1)) if n > 1 else 0.0,
        "stderr_return": float(returns_arr.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
    }


def load_checkpoint_model(
    ckpt_path: str | Path,
) -> tuple[CommFormerModel, CommGraph, RunConfig, dict]:
    tensors, meta = load_container(ckpt_path)
    if "config" not in meta:
        raise ConfigError(f"checkpoint {ckpt_path} carries no config")
    cfg = parse_config(meta["config"], source=f"{ckpt_path}:config")
    model = CommFormerModel(cfg.model_config())
    model_state = {
        name[len("model.") :]: torch.from_numpy(arr.copy())
        for name, arr in tensors.items()
        if name.startswith("model.")
    }
    model.load_state_dict(model_state)
    model.eval()
    if "frozen_edges" in tensors:
        graph = CommGraph(edges=torch.from_numpy(tensors["frozen_edges"].copy()), k=int(meta["k"]))
    else:
        alpha = torch.from_numpy(tensors["alpha"].copy())
        params = AdjacencyParams(alpha=alpha, n_agents=alpha.shape[0])
        graph = infer_graph(params, int(meta["k"]))
    return model, graph, cfg, meta


def run_eval(
    ckpt_path: str | Path, episodes: int, seed: int, policy: str = "greedy"
) -> dict:
    apply_env_settings()
    model, graph, cfg, _ = load_checkpoint_model(ckpt_path)
    spec = cfg.env_spec(evaluation=True)
    report = evaluate_policy(model, graph, spec, episodes, seed, policy=policy)
    report["checkpoint"] = str(ckpt_path)
    report["env"] = spec.name
    return report


# -- ablation ----------------------------------------------------------------


def parse_sweep(text: str, source: str = "<sweep>") -> dict:
    """Sweep spec: sweep.sparsity (space-separated floats), sweep.graph_seeds
    (space-separated ints), sweep.modes (extra fixed modes), sweep.train_seeds
    (int), sweep.eval_episodes (int)."""
    out = {"sparsity": [], "graph_seeds": [], "modes": [], "train_seeds": 5, "eval_episodes": 200}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key == "sweep.sparsity":
            out["sparsity"] = [float(x) for x in val.split()]
        elif key == "sweep.graph_seeds":
            out["graph_seeds"] = [int(x) for x in val.split()]
        elif key == "sweep.modes":
            out["modes"] = val.split()
        elif key == "sweep.train_seeds":
            out["train_seeds"] = int(val)
        elif key == "sweep.eval_episodes":
            out["eval_episodes"] = int(val)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown sweep key {key!r}")
    if not (out["sparsity"] or out["graph_seeds"] or out["modes"]):
        raise ConfigError(f"{source}: empty sweep (no sparsity values, graph seeds, or modes)")
    return out


def cell_seed(master_seed: int, label: str) -> int:
    return (master_seed ^ zlib.crc32(label.encode("utf-8"))) & 0x7FFFFFFF


def _sweep_cells(sweep: dict) -> list[tuple[str, dict]]:
    cells: list[tuple[str, dict]] = []
    for s in sweep["sparsity"]:
        cells.append((f"learned_S{s:g}", {"run.mode": "learned", "train.sparsity": s}))
    for gs in sweep["graph_seeds"]:
        cells.append((f"fixed-random_g{gs}", {"run.mode": "fixed-random", "run.graph_seed": gs}))
    for mode in sweep["modes"]:
        cells.append((mode, {"run.mode": mode}))
    return cells


def run_ablate(base_cfg: RunConfig, sweep: dict, out_dir: str | Path) -> list[dict]:
    apply_env_settings()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = _sweep_cells(sweep)
    rows: list[dict] = []
    for label, overrides in cells:
        cell_dir = out / label
        if cell_dir.exists() and any(cell_dir.iterdir()):
            raise ConfigError(f"refusing to overwrite non-empty cell directory {cell_dir}")
        base_seed = cell_seed(base_cfg.seed, label)
        for rep in range(sweep["train_seeds"]):
            cfg = base_cfg.with_overrides(**overrides, **{"run.seed": base_seed + rep})
            run_dir = cell_dir / f"seed_{rep}"
            trainer = run_train(cfg, run_dir)
            model = trainer.model
            report = evaluate_policy(
                model,
                trainer.current_graph(),
                cfg.env_spec(evaluation=True),
                sweep["eval_episodes"],
                seed=base_seed + 10_000 + rep,
            )
            rows.append(
                {
                    "cell": label,
                    "seed": base_seed + rep,
                    "mean_return": report["mean_return"],
                    "std_return": report["std"],
                    "success_rate": report["success_rate"],
                    "mean_steps": report["mean_steps"],
                }
            )
    _write_ablation_outputs(rows, out)
    return rows


def _write_ablation_outputs(rows: list[dict], out: Path) -> None:
    from .plots import plot_ablation

    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    cells = sorted({r["cell"] for r in rows}, key=lambda c: [r["cell"] for r in rows].index(c))
    means, stds, lines = [], [], []
    for cell in cells:
        vals = np.array([r["mean_return"] for r in rows if r["cell"] == cell])
        means.append(vals.mean())
        stds.append(vals.std(ddof=1) if len(vals) > 1 else 0.0)
        lines.append(
            f"{cell}: mean_return {vals.mean():.4f} +/- {stds[-1]:.4f} over {len(vals)} seeds"
        )
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    plot_ablation(cells, np.array(means), np.array(stds), out / "ablation.png")


# -- export ------------------------------------------------------------------

_CURVE_METRICS = (
    "mean_return",
    "mean_ep_len",
    "success_rate",
    "L_enc",
    "L_dec",
    "entropy",
    "grad_norm",
    "alpha_drift",
    "edges_changed",
)


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def run_export(run_dir: str | Path, out_dir: str | Path | None = None) -> Path:
    """Emit plot-ready CSVs (one per metric, columns env_steps/mean/std) and
    adjacency frames, plus rendered figures."""
    from .plots import plot_adjacency_evolution, plot_learning_curves

    run = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run / "export"
    seed_dirs = sorted(d for d in run.glob("seed_*") if (d / "metrics.jsonl").exists())
    if (run / "metrics.jsonl").exists():
        metric_sets = [_read_jsonl(run / "metrics.jsonl")]
        snap_path = run / "snapshots.jsonl"
    elif seed_dirs:
        metric_sets = [_read_jsonl(d / "metrics.jsonl") for d in seed_dirs]
        snap_path = seed_dirs[0] / "snapshots.jsonl"
    else:
        raise ConfigError(f"no metrics.jsonl found under {run}")
    out.mkdir(parents=True, exist_ok=True)
    n_iters = min(len(ms) for ms in metric_sets)
    curves: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    steps = np.array([metric_sets[0][i]["env_steps"] for i in range(n_iters)], dtype=float)
    for metric in _CURVE_METRICS:
        data = np.array(
            [[ms[i][metric] for i in range(n_iters)] for ms in metric_sets], dtype=float
        )
        mean = data.mean(axis=0)
        std = data.std(axis=0, ddof=1) if data.shape[0] > 1 else np.zeros(n_iters)
        curves[metric] = (steps, mean, std)
        with open(out / f"{metric}.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["env_steps", "mean", "std"])
            for s, m, sd in zip(steps, mean, std):
                writer.writerow([repr(float(s)), repr(float(m)), repr(float(sd))])
    frames = []
    if snap_path.exists():
        snaps = _read_jsonl(snap_path)
        frames_dir = out / "frames"
        frames_dir.mkdir(exist_ok=True)
        for i, snap in enumerate(snaps):
            edges = np.asarray(snap["edges"])
            frames.append((int(snap["step"]), edges))
            with open(frames_dir / f"edges_{i:04d}.csv", "w", newline="") as f:
                csv.writer(f).writerows(edges.tolist())
            with open(frames_dir / f"alpha_{i:04d}.csv", "w", newline="") as f:
                csv.writer(f).writerows([[repr(float(x)) for x in row] for row in snap["alpha"]])
    plot_learning_curves(curves, out / "learning_curves.png")
    if frames:
        plot_adjacency_evolution(frames, out / "adjacency_evolution.png")
    return out
