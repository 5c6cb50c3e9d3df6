"""Adam optimizer with exponential learning-rate decay, plus a
finite-difference gradient verification harness."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .params import ParamStore


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: ParamStore) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Pure function of its inputs."""
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        new_p[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_p, AdamState(m=new_m, v=new_v, step=t)


def exp_decay_lr(step: int, total_steps: int, lr0: float, lr1: float) -> float:
    """lr0 -> lr1 geometrically over total_steps."""
    if total_steps <= 1:
        return lr0
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr0 * (lr1 / lr0) ** frac


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    """Per-layer-type worst relative error of backward vs central differences."""

    max_rel_err: float
    by_layer_type: dict[str, float]
    worst_param: str
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary(self) -> str:
        lines = [
            f"grad_check: max_rel_err={self.max_rel_err:.3e} "
            f"tol={self.tolerance:.1e} {'PASS' if self.passed else 'FAIL'} "
            f"(worst: {self.worst_param}, {self.n_checked} entries)"
        ]
        for k in sorted(self.by_layer_type):
            lines.append(f"  {k:<12s} {self.by_layer_type[k]:.3e}")
        return "\n".join(lines)


def layer_type_of(name: str) -> str:
    """Coarse bucket for reporting: first two path components."""
    parts = name.split(".")
    return ".".join(parts[:2]) if len(parts) > 1 else parts[0]


def grad_check(
    loss_fn,
    params: ParamStore,
    step: float = 1e-5,
    tolerance: float = 1e-6,
    max_entries_per_param: int | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn(params)`` must rebuild the graph and return a scalar Var. The
    finite-difference oracle always evaluates the loss in float64 (parameters
    are promoted entry-wise), independent of the dtype the backward pass ran
    in, so it stays an oracle rather than a second copy of the same rounding.
    A fourth-order stencil keeps truncation below the round-off floor.

    Relative error per entry is |g - fd| / max(|fd|, |g|, 1% of the global
    gradient sup-norm): a plain per-entry ratio is meaningless for entries
    whose true gradient sits below what finite differences of a float64 loss
    can resolve (~1e-11 absolute here).
    """
    if params.n_params > 10_000:
        raise ValueError("grad_check is meant for small models (<= 1e4 params)")

    with ad.Tape() as tape:
        loss = loss_fn(params)
    grads = params.gradients(tape, loss)
    g_scale = max(max(np.abs(g).max() for g in grads.values()), 1e-12)
    floor = 0.01 * g_scale

    # FD oracle store: same point, promoted to float64
    oracle = ParamStore(np.float64)
    for k, v in params.items():
        oracle.add(k, v.data.astype(np.float64))

    def eval_at(flat, i, delta):
        orig = flat[i]
        flat[i] = orig + delta
        out = float(ad.value(loss_fn(oracle)))
        flat[i] = orig
        return out

    by_type: dict[str, float] = {}
    worst = ("", 0.0)
    n_checked = 0
    for name, var in oracle.items():
        flat = var.data.reshape(-1)
        g_flat = grads[name].reshape(-1)
        n = flat.size
        idxs = range(n)
        if max_entries_per_param is not None and n > max_entries_per_param:
            idxs = np.linspace(0, n - 1, max_entries_per_param).astype(int)
        for i in idxs:
            f2p = eval_at(flat, i, 2 * step)
            f1p = eval_at(flat, i, step)
            f1m = eval_at(flat, i, -step)
            f2m = eval_at(flat, i, -2 * step)
            fd = (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * step)
            g = float(g_flat[i])
            err = abs(g - fd) / max(abs(fd), abs(g), floor)
            n_checked += 1
            lt = layer_type_of(name)
            if err > by_type.get(lt, 0.0):
                by_type[lt] = err
            if err > worst[1]:
                worst = (f"{name}[{i}]", err)
    return GradCheckReport(
        max_rel_err=worst[1],
        by_layer_type=by_type,
        worst_param=worst[0],
        n_checked=n_checked,
        tolerance=tolerance,
    )
