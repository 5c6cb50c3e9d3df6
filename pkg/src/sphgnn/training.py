"""Training-pair construction, noise injection, pushforward loss, rollout,
and the optimization loop.

All quantities are nondimensionalized to frame units: a velocity is the
position delta between consecutive recorded frames, an acceleration its
second difference. That keeps velocity, noise and target scales comparable
at the 10x-coarsened frame spacing.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .box import DomainSpec, min_image, wrap_positions
from .gns import GNS, GNSConfig
from .graphs import GraphSample, assemble_sample
from .normalization import COMPONENT, MAGNITUDE, NormalizationStats, compute_stats
from .optim import AdamState, adam_step, exp_decay_lr
from .params import ParamStore
from .segnn import SEGNN, SEGNNConfig
from .sph import Trajectory

MODEL_KINDS = ("gns", "segnn-avg", "segnn-lin", "segnn-tensor", "zero")


@dataclass(frozen=True)
class TrainConfig:
    model: str = "segnn-avg"
    history: int = 5
    hidden: int = 64
    layers: int = 10
    force_in_attributes: bool = False
    radius: float | None = None  # default: 1.5 * dx from trajectory metadata
    noise_std: float = 3e-4  # accumulated random-walk std, frame units
    pushforward_steps: int = 5
    pushforward_base: float = 0.5
    # fraction of training with pushforward disabled: rolling an untrained
    # model inflates the corrected targets by orders of magnitude and wrecks
    # early optimization, so the schedule is ramped in
    pushforward_warmup_frac: float = 0.25
    batch_size: int = 2
    steps: int = 2000
    lr: float = 1e-3
    lr_final: float = 1e-5
    val_every: int = 100
    val_samples: int = 16
    val_rollout_steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}")
        if self.history < 1 or self.pushforward_steps < 0:
            raise ValueError("history >= 1 and pushforward_steps >= 0 required")
        if not (0.0 < self.pushforward_base <= 1.0):
            raise ValueError("pushforward_base must be in (0, 1]")


class ZeroModel:
    """Baseline predicting zero acceleration (free-flight particles)."""

    kind = "zero"

    def init_params(self, rng, dtype=np.float64) -> ParamStore:
        return ParamStore(dtype)

    def forward(self, params, sample, stats):
        return np.zeros((sample.n_nodes, 3), dtype=params.dtype)


def build_model(cfg: TrainConfig):
    if cfg.model == "gns":
        return GNS(GNSConfig(history=cfg.history, latent=cfg.hidden, layers=cfg.layers))
    if cfg.model == "zero":
        return ZeroModel()
    hae = cfg.model.split("-", 1)[1]
    return SEGNN(
        SEGNNConfig(
            history=cfg.history,
            hidden=cfg.hidden,
            layers=cfg.layers,
            hae=hae,
            force_in_attributes=cfg.force_in_attributes,
        )
    )


def stats_mode_for(model_kind: str) -> str:
    """Per-component stats for the non-equivariant model; magnitude-only for
    the equivariant ones (per-axis shifts/scales would break equivariance)."""
    return COMPONENT if model_kind == "gns" else MAGNITUDE


# ---------------------------------------------------------------------------
# training pairs


def rpf_force_at(positions: np.ndarray, traj: Trajectory) -> np.ndarray:
    from .sph import rpf_accel

    f = float(traj.metadata.get("rpf_force", 0.0))
    acc = rpf_accel(positions, traj.domain, f)
    return acc * traj.frame_dt**2  # physical accel -> frame units


def frame_force(positions: np.ndarray, traj: Trajectory) -> np.ndarray:
    if traj.scenario == "rpf":
        return rpf_force_at(positions, traj)
    return np.zeros_like(positions)


def make_training_pair(
    traj: Trajectory, t: int, history: int, radius: float
) -> GraphSample:
    """Sample at frame t: H past velocities, target = second difference
    p[t+1] - 2 p[t] + p[t-1] under minimum image."""
    if not (history <= t < traj.n_frames - 1):
        raise IndexError(
            f"frame {t} out of range for H={history}, frames={traj.n_frames}"
        )
    box = traj.domain.array
    window = traj.positions[t - history : t + 1]
    v_next = min_image(traj.positions[t + 1] - traj.positions[t], box)
    v_last = min_image(traj.positions[t] - traj.positions[t - 1], box)
    target = v_next - v_last
    return assemble_sample(
        window,
        traj.domain,
        radius,
        force=frame_force(traj.positions[t], traj),
        target=target,
    )


def add_noise(sample: GraphSample, std: float, seed: int, domain: DomainSpec) -> GraphSample:
    """Random-walk perturbation of the velocity history.

    Per-step increments have std ``std / sqrt(H)`` and are accumulated, so
    the last (current) velocity carries the full configured std. The current
    position absorbs the accumulated walk; the target is corrected so that
    integrating the perturbed state still lands on the true next position.
    std = 0 returns the sample unchanged.
    """
    if std == 0.0:
        return sample
    rng = np.random.default_rng(seed)
    h = sample.history
    steps = rng.normal(0.0, std / np.sqrt(h), size=sample.vel_history.shape)
    walk = np.cumsum(steps, axis=1)  # (N, H, 3)
    vel = sample.vel_history + walk
    # position shift = integral of the velocity perturbation
    pos_shift = walk.sum(axis=1)
    positions = wrap_positions(sample.positions + pos_shift, domain.array)
    target = sample.target
    if target is not None:
        # keep (noisy pos) + (noisy last vel) + target == true next position
        true_next = sample.positions + sample.vel_history[:, -1] + sample.target
        target = min_image(true_next - positions, domain.array) - vel[:, -1]

    window = np.empty((h + 1,) + sample.positions.shape)
    window[-1] = positions
    for k in range(h, 0, -1):
        window[k - 1] = window[k] - vel[:, k - 1]
    return assemble_sample(
        window,
        domain,
        sample.radius,
        force=sample.force,
        target=target,
    )


# ---------------------------------------------------------------------------
# pushforward loss and rollout


def pushforward_probabilities(max_steps: int, base: float) -> np.ndarray:
    """P(s) proportional to base^s for s in {0..max_steps}; sums to 1."""
    w = base ** np.arange(max_steps + 1, dtype=np.float64)
    return w / w.sum()


def _predict_frame_units(model, params, sample, stats):
    out = ad.value(model.forward(params, sample, stats))
    return stats.denormalize_accel(out.astype(np.float64))


def pushforward_loss(
    model,
    params: ParamStore,
    traj: Trajectory,
    t: int,
    config: TrainConfig,
    stats: NormalizationStats,
    seed: int,
    n_push: int | None = None,
    s_cap: int | None = None,
    rollout_params: ParamStore | None = None,
):
    """One-step acceleration MSE after ``n_push`` gradient-free model steps.

    ``n_push`` is sampled from the exponentially decaying schedule when not
    given (``s_cap`` clamps it, used by the warmup ramp). The rollout segment
    runs without recording, so its parameters receive exactly zero gradient;
    gradients flow only through the final prediction. ``rollout_params``
    substitutes a separate store for the rollout segment only -- the
    stop-gradient tests perturb it to show the tape's zeros are structural.
    """
    rng = np.random.default_rng(seed)
    probs = pushforward_probabilities(config.pushforward_steps, config.pushforward_base)
    if n_push is None:
        n_push = int(rng.choice(len(probs), p=probs))
    if s_cap is not None:
        n_push = min(n_push, s_cap)
    if t + n_push + 1 >= traj.n_frames:
        n_push = traj.n_frames - 2 - t
    radius = config.radius or 1.5 * traj.metadata.get("dx", 0.05)
    box = traj.domain.array

    sample = make_training_pair(traj, t, config.history, radius)
    sample = add_noise(sample, config.noise_std, seed + 1, traj.domain)

    if n_push == 0:
        final = sample  # noisy targets are already consistency-corrected
    else:
        push_store = rollout_params if rollout_params is not None else params
        with ad.no_grad():
            window = _window_from_sample(sample)
            for _ in range(n_push):
                s = assemble_sample(
                    window, traj.domain, radius, force=frame_force(window[-1], traj)
                )
                acc = _predict_frame_units(model, push_store, s, stats)
                vel = min_image(window[-1] - window[-2], box) + acc
                nxt = wrap_positions(window[-1] + vel, box)
                window = np.concatenate([window[1:], nxt[None]], axis=0)

        # target correction toward the true next frame, as in add_noise
        truth = traj.positions[t + n_push + 1]
        vel_last = min_image(window[-1] - window[-2], box)
        target = min_image(truth - window[-1], box) - vel_last
        final = assemble_sample(
            window, traj.domain, radius,
            force=frame_force(window[-1], traj),
            target=target,
        )
    pred = model.forward(params, final, stats)
    target_n = stats.normalize_accel(final.target).astype(params.dtype)
    return ad.mse(pred, target_n)


def _window_from_sample(sample: GraphSample) -> np.ndarray:
    h = sample.history
    window = np.empty((h + 1,) + sample.positions.shape)
    window[-1] = sample.positions
    for k in range(h, 0, -1):
        window[k - 1] = window[k] - sample.vel_history[:, k - 1]
    return window


def rollout(
    predict,
    initial_window: np.ndarray,
    domain: DomainSpec,
    radius: float,
    n_steps: int,
    force_fn=None,
) -> np.ndarray:
    """Autoregressive semi-implicit Euler rollout in frame units.

    ``predict(sample) -> (N, 3)`` frame-unit accelerations. Returns all
    frames: the H+1 seed frames followed by ``n_steps`` predictions.
    Raises ``RolloutDiverged`` if a prediction goes non-finite.
    """
    box = domain.array
    window = np.array(initial_window, dtype=np.float64)
    frames = [window[k].copy() for k in range(window.shape[0])]
    for k in range(n_steps):
        force = None if force_fn is None else force_fn(window[-1])
        sample = assemble_sample(window, domain, radius, force=force)
        acc = np.asarray(predict(sample), dtype=np.float64)
        if not np.all(np.isfinite(acc)):
            raise RolloutDiverged(k)
        vel = min_image(window[-1] - window[-2], box) + acc
        nxt = wrap_positions(window[-1] + vel, box)
        frames.append(nxt.copy())
        window = np.concatenate([window[1:], nxt[None]], axis=0)
    return np.stack(frames)


class RolloutDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"rollout produced non-finite prediction at step {step}")
        self.step = step


def model_predictor(model, params: ParamStore, stats: NormalizationStats):
    """Wrap a model as a frame-unit predictor for rollout (no gradients)."""

    def predict(sample: GraphSample) -> np.ndarray:
        with ad.no_grad():
            return _predict_frame_units(model, params, sample, stats)

    return predict


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainState:
    params: ParamStore
    opt: AdamState
    step: int
    stats: NormalizationStats
    best_val: float = np.inf
    history: list = field(default_factory=list)  # (step, train_loss, val_mse_p)


def _valid_frames(traj: Trajectory, cfg: TrainConfig) -> np.ndarray:
    lo = cfg.history
    hi = traj.n_frames - 1  # t+1 must exist; pushforward clamps internally
    return np.arange(lo, hi)


def init_training(
    train_trajs: list[Trajectory], cfg: TrainConfig, dtype=np.float64
) -> tuple:
    model = build_model(cfg)
    params = model.init_params(np.random.default_rng(cfg.seed), dtype=dtype)
    stats = compute_stats(
        [t.positions for t in train_trajs],
        train_trajs[0].domain.array,
        stats_mode_for(cfg.model),
    )
    return model, TrainState(
        params=params, opt=AdamState.init(params), step=0, stats=stats
    )


def one_step_val_mse(model, params, stats, val_traj: Trajectory, cfg: TrainConfig) -> float:
    """Mean one-step acceleration MSE (normalized units) on a fixed,
    deterministic set of validation frames."""
    radius = cfg.radius or 1.5 * val_traj.metadata.get("dx", 0.05)
    frames = _valid_frames(val_traj, cfg)
    picks = frames[np.linspace(0, len(frames) - 1, min(cfg.val_samples, len(frames))).astype(int)]
    total = 0.0
    for t in picks:
        s = make_training_pair(val_traj, int(t), cfg.history, radius)
        with ad.no_grad():
            pred = ad.value(model.forward(params, s, stats))
        target = stats.normalize_accel(s.target)
        total += float(np.mean((pred - target) ** 2))
    return total / len(picks)


def rollout_val_mse_p(model, params, stats, val_traj: Trajectory, cfg: TrainConfig) -> float:
    """Short-rollout position MSE against the validation trajectory."""
    from .metrics import mse_positions

    radius = cfg.radius or 1.5 * val_traj.metadata.get("dx", 0.05)
    h = cfg.history
    n = min(cfg.val_rollout_steps, val_traj.n_frames - h - 1)
    if n <= 0:
        return float("nan")
    force_fn = (lambda p: rpf_force_at(p, val_traj)) if val_traj.scenario == "rpf" else None
    pred = rollout(
        model_predictor(model, params, stats),
        val_traj.positions[: h + 1],
        val_traj.domain,
        radius,
        n,
        force_fn=force_fn,
    )
    errs = [
        mse_positions(pred[h + 1 + k], val_traj.positions[h + 1 + k], val_traj.domain)
        for k in range(n)
    ]
    return float(np.mean(errs))


def train_step(
    model,
    state: TrainState,
    train_trajs: list[Trajectory],
    cfg: TrainConfig,
) -> float:
    """One optimizer step over a freshly sampled batch. Deterministic given
    (config seed, step index): per-step RNG streams are derived from both."""
    step = state.step
    rng = np.random.default_rng([cfg.seed, 7919, step])
    s_cap = 0 if step < cfg.pushforward_warmup_frac * cfg.steps else None
    losses = []
    grads_acc: dict[str, np.ndarray] = {
        k: np.zeros_like(v.data) for k, v in state.params.items()
    }
    for b in range(cfg.batch_size):
        ti = int(rng.integers(len(train_trajs)))
        traj = train_trajs[ti]
        frames = _valid_frames(traj, cfg)
        t = int(frames[rng.integers(len(frames))])
        noise_seed = int(rng.integers(2**31))
        with ad.Tape() as tape:
            loss = pushforward_loss(
                model, state.params, traj, t, cfg, state.stats, noise_seed,
                s_cap=s_cap,
            )
        g = state.params.gradients(tape, loss)
        for k in grads_acc:
            grads_acc[k] += g[k]
        losses.append(float(ad.value(loss)))
    for k in grads_acc:
        grads_acc[k] /= cfg.batch_size
    lr = exp_decay_lr(step, cfg.steps, cfg.lr, cfg.lr_final)
    new_params, new_opt = adam_step(state.params.arrays(), grads_acc, state.opt, lr)
    state.params.load(new_params)
    state.opt = new_opt
    state.step = step + 1
    return float(np.mean(losses))
