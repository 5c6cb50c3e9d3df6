"""Command-line entry points: generate | train | rollout | evaluate."""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backend import backend_name
from .box import DomainSpec
from .metrics import evaluate_rollout
from .normalization import NormalizationStats
from .optim import AdamState
from .sph import SolverBlowup, Trajectory, generate_trajectory
from .trajio import (
    FormatError,
    RunConfig,
    read_checkpoint,
    read_trajectory,
    write_checkpoint,
    write_csv,
    write_trajectory,
)
from .training import (
    TrainConfig,
    TrainState,
    build_model,
    init_training,
    model_predictor,
    one_step_val_mse,
    rollout,
    rollout_val_mse_p,
    rpf_force_at,
    train_step,
)

SPLITS = ("train", "valid", "test")


def _echo(msg: str):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# generate


def _ekin_rows(traj: Trajectory):
    for k in range(traj.n_frames):
        v = traj.velocities[k]
        ek = 0.5 * traj.particle_mass * float(np.einsum("ik,ik->i", v, v).sum())
        yield (k, k * traj.frame_dt, ek)


def cmd_generate(config: RunConfig, out_dir: Path) -> dict:
    """Write the dataset described by the config; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scfg = config.scenario_config()
    scfg.validate()
    manifest = {
        "config": config.to_dict(),
        "scenario": config.scenario,
        "splits": {},
        "format": "sphgnn-dataset-v1",
    }
    written: list[Path] = []
    try:
        if scfg.scenario == "tgv":
            counts = [config.dataset[f"n_{s}"] for s in SPLITS]
            idx = 0
            for split, count in zip(SPLITS, counts):
                (out_dir / split).mkdir(exist_ok=True)
                files = []
                for _ in range(count):
                    seed = config.seed * 10000 + idx
                    name = f"{split}/tgv_{idx:03d}.lgtr"
                    path = out_dir / name
                    _echo(f"generating {name} (seed {seed})")
                    traj = generate_trajectory(scfg, seed)
                    write_trajectory(path, traj)
                    written.append(path)
                    write_csv(
                        out_dir / f"{split}/tgv_{idx:03d}_ekin.csv",
                        ["frame", "time", "ekin"],
                        _ekin_rows(traj),
                    )
                    files.append({"file": name, "seed": seed})
                    idx += 1
                manifest["splits"][split] = files
        else:
            # one long stationary trajectory, split into time windows
            n_train = config.dataset["n_train"]
            n_valid = config.dataset["n_valid"]
            n_test = config.dataset["n_test"]
            total = n_train + n_valid + n_test
            scfg = replace(scfg, frames=total)
            seed = config.seed * 10000
            _echo(f"generating rpf_long.lgtr ({total} frames, seed {seed})")
            traj = generate_trajectory(scfg, seed)
            path = out_dir / "rpf_long.lgtr"
            write_trajectory(path, traj)
            written.append(path)
            write_csv(out_dir / "rpf_long_ekin.csv", ["frame", "time", "ekin"], _ekin_rows(traj))
            bounds = {
                "train": [0, n_train],
                "valid": [n_train, n_train + n_valid],
                "test": [n_train + n_valid, total],
            }
            for split in SPLITS:
                manifest["splits"][split] = [
                    {"file": "rpf_long.lgtr", "frames": bounds[split], "seed": seed}
                ]
    except SolverBlowup:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    _echo(f"dataset written to {out_dir}")
    return manifest


def load_dataset(data_dir: Path) -> dict[str, list[Trajectory]]:
    data_dir = Path(data_dir)
    with open(data_dir / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cache: dict[str, Trajectory] = {}
    out: dict[str, list[Trajectory]] = {}
    for split, entries in manifest["splits"].items():
        trajs = []
        for e in entries:
            if e["file"] not in cache:
                cache[e["file"]] = read_trajectory(data_dir / e["file"])
            traj = cache[e["file"]]
            if "frames" in e:
                lo, hi = e["frames"]
                traj = Trajectory(
                    positions=traj.positions[lo:hi],
                    velocities=None if traj.velocities is None else traj.velocities[lo:hi],
                    frame_dt=traj.frame_dt,
                    domain=traj.domain,
                    scenario=traj.scenario,
                    metadata=traj.metadata,
                )
            trajs.append(traj)
        out[split] = trajs
    return out


# ---------------------------------------------------------------------------
# train


def _save_checkpoint(path, config: RunConfig, state: TrainState):
    write_checkpoint(
        path,
        model_config=config.model,
        params=state.params.arrays(),
        opt_state={"m": state.opt.m, "v": state.opt.v, "step": state.opt.step},
        extra={
            "step": state.step,
            "stats": state.stats.to_dict(),
            "config": config.to_dict(),
            "best_val": state.best_val if np.isfinite(state.best_val) else None,
        },
    )


def load_model_from_checkpoint(path):
    """Returns (model, params, stats, extra)."""
    model_cfg, arrays, opt_state, extra = read_checkpoint(path)
    tcfg = TrainConfig(
        model=model_cfg["kind"],
        history=model_cfg.get("history", 5),
        hidden=model_cfg.get("hidden", 64),
        layers=model_cfg.get("layers", 10),
        force_in_attributes=model_cfg.get("force_in_attributes", False),
        radius=model_cfg.get("radius"),
    )
    model = build_model(tcfg)
    params = model.init_params(np.random.default_rng(0))
    if len(params):
        params.load(arrays)
    stats = NormalizationStats.from_dict(extra["stats"])
    return model, params, stats, extra, opt_state, tcfg


def cmd_train(config: RunConfig, data_dir: Path, out_dir: Path, resume=None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_dataset(data_dir)
    if not data.get("train"):
        raise FormatError("dataset has no training trajectories")
    tcfg = config.train_config()
    h_needed = tcfg.history + 2
    for traj in data["train"]:
        if traj.n_frames < h_needed:
            raise FormatError(
                f"trajectory has {traj.n_frames} frames; training with H={tcfg.history} "
                f"needs at least {h_needed}"
            )
        if not np.allclose(traj.domain.array, data["train"][0].domain.array):
            raise FormatError("trajectories in the dataset disagree on the box")

    model, state = init_training(data["train"], tcfg)
    if resume is not None:
        _, arrays, opt_state, extra = read_checkpoint(resume)
        state.params.load(arrays)
        if opt_state is not None:
            state.opt = AdamState(m=opt_state["m"], v=opt_state["v"], step=opt_state["step"])
        state.step = int(extra.get("step", state.opt.step))
        state.stats = NormalizationStats.from_dict(extra["stats"])
        _echo(f"resumed from {resume} at step {state.step}")

    val_traj = (data.get("valid") or data["train"])[0]
    curve = []
    _echo(f"training {tcfg.model} ({state.params.n_params} params, backend {backend_name()})")
    while state.step < tcfg.steps:
        loss = train_step(model, state, data["train"], tcfg)
        step = state.step
        if step % tcfg.val_every == 0 or step == tcfg.steps:
            val_p = rollout_val_mse_p(model, state.params, state.stats, val_traj, tcfg)
            val_acc = one_step_val_mse(model, state.params, state.stats, val_traj, tcfg)
            curve.append((step, loss, val_p))
            state.history.append((step, loss, val_p, val_acc))
            _echo(f"step {step:6d} loss {loss:.4e} val_mse_p {val_p:.4e} val_acc {val_acc:.4e}")
            _save_checkpoint(out_dir / "last.ckpt", config, state)
            if val_p < state.best_val:
                state.best_val = val_p
                _save_checkpoint(out_dir / "best.ckpt", config, state)
    _save_checkpoint(out_dir / "last.ckpt", config, state)
    if not (out_dir / "best.ckpt").exists():
        _save_checkpoint(out_dir / "best.ckpt", config, state)
    write_csv(out_dir / "curve.csv", ["step", "train_loss", "val_mse_p"], curve)
    return {"steps": state.step, "best_val": state.best_val}


# ---------------------------------------------------------------------------
# rollout / evaluate


def _force_fn_for(traj: Trajectory):
    if traj.scenario == "rpf":
        return lambda p: rpf_force_at(p, traj)
    return None


def _rollout_prediction(model, params, stats, tcfg, traj: Trajectory, n_steps: int):
    h = tcfg.history
    radius = tcfg.radius or 1.5 * traj.metadata.get("dx", 0.05)
    predict = model_predictor(model, params, stats)
    return rollout(
        predict,
        traj.positions[: h + 1],
        traj.domain,
        radius,
        n_steps,
        force_fn=_force_fn_for(traj),
    )


def cmd_rollout(checkpoint, trajectory_path, out_path, n_steps=None) -> Path:
    model, params, stats, extra, _, tcfg = load_model_from_checkpoint(checkpoint)
    traj = read_trajectory(trajectory_path)
    cfg_eval = extra.get("config", {}).get("evaluate", {})
    steps = n_steps or cfg_eval.get("rollout_steps", 100)
    pred = _rollout_prediction(model, params, stats, tcfg, traj, steps)
    out = Trajectory(
        positions=pred,
        velocities=None,
        frame_dt=traj.frame_dt,
        domain=traj.domain,
        scenario=traj.scenario,
        metadata={
            "rollout_of": str(trajectory_path),
            "checkpoint": str(checkpoint),
            "seed_frames": tcfg.history + 1,
            "model": extra.get("config", {}).get("model", {}),
        },
    )
    write_trajectory(out_path, out)
    _echo(f"rollout written to {out_path}")
    return Path(out_path)


def cmd_evaluate(checkpoint, data_dir, out_dir, split="test") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, params, stats, extra, _, tcfg = load_model_from_checkpoint(checkpoint)
    data = load_dataset(data_dir)
    trajs = data.get(split) or []
    if not trajs:
        raise FormatError(f"dataset has no {split!r} trajectories")
    ev = extra.get("config", {}).get("evaluate", {})
    rollout_steps = ev.get("rollout_steps", 100)
    h = tcfg.history

    summaries = []
    for idx, traj in enumerate(trajs):
        n_steps = min(rollout_steps, traj.n_frames - h - 1)
        diverged_at = None
        try:
            pred = _rollout_prediction(model, params, stats, tcfg, traj, rollout_steps)
        except Exception as exc:  # rollout divergence: keep partial metrics
            from .training import RolloutDiverged

            if not isinstance(exc, RolloutDiverged):
                raise
            diverged_at = exc.step
            pred = _rollout_prediction(model, params, stats, tcfg, traj, max(exc.step - 1, 0))
            n_steps = min(n_steps, max(exc.step - 1, 0))
        report = evaluate_rollout(
            pred[: h + 1 + n_steps],
            traj.positions,
            traj.domain,
            traj.frame_dt,
            traj.particle_mass,
            first_step=h + 1,
            eps=ev.get("sinkhorn_eps", 1e-3),
            max_iters=ev.get("sinkhorn_max_iters", 500),
            tol=ev.get("sinkhorn_tol", 1e-6),
        )
        report.diverged_at = diverged_at
        rows = [
            (k + 1, report.mse_p[k], report.ekin_pred[k], report.ekin_ref[k], report.sinkhorn[k])
            for k in range(len(report.mse_p))
        ]
        write_csv(
            out_dir / f"{split}_{idx:03d}_steps.csv",
            ["step", "mse_p", "ekin_pred", "ekin_ref", "sinkhorn"],
            rows,
        )
        summaries.append(report.summary())
        _echo(
            f"{split}[{idx}]: mse_p {summaries[-1]['mse_p']:.4e} "
            f"mse_ekin {summaries[-1]['mse_ekin']:.4e} "
            f"sinkhorn {summaries[-1]['sinkhorn_mean']:.4e}"
            + (f" (diverged at step {diverged_at})" if diverged_at is not None else "")
        )
    summary = {
        key: float(np.mean([s[key] for s in summaries]))
        for key in ("mse_p", "mse_ekin", "sinkhorn_mean")
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    _echo(f"summary: {summary}")
    return summary


# ---------------------------------------------------------------------------
# argv plumbing


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sphgnn",
        description="SPH datasets and learned graph-network surrogates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate and write a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("rollout", help="autoregressive rollout from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("evaluate", help="rollout metrics on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")

    args = parser.parse_args(argv)
    try:
        if args.command in ("generate", "train"):
            config = RunConfig.load(args.config)
            if args.seed is not None:
                config.seed = args.seed
        if args.command == "generate":
            cmd_generate(config, Path(args.out))
        elif args.command == "train":
            cmd_train(config, Path(args.data), Path(args.out), resume=args.resume)
        elif args.command == "rollout":
            cmd_rollout(args.checkpoint, args.trajectory, args.out, n_steps=args.steps)
        elif args.command == "evaluate":
            cmd_evaluate(args.checkpoint, args.data, Path(args.out))
    except (FormatError, ValueError, SolverBlowup) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
