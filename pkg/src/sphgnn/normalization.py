"""Input/target normalization statistics.

Two modes mirror the two model families. Component mode stores per-component
means and stds of velocities and accelerations over the training set (more
informative, but the per-axis treatment does not commute with rotations).
Magnitude mode stores a single scalar per quantity -- the standard deviation
of the vector magnitudes -- so normalization is just a uniform rescale and
commutes exactly with every rotation and reflection.
"""

from dataclasses import dataclass

import numpy as np

from .box import min_image

COMPONENT = "component"
MAGNITUDE = "magnitude"


@dataclass
class NormalizationStats:
    mode: str
    vel_mean: np.ndarray | None = None  # (3,)
    vel_std: np.ndarray | None = None  # (3,)
    acc_mean: np.ndarray | None = None  # (3,)
    acc_std: np.ndarray | None = None  # (3,)
    vel_scale: float | None = None
    acc_scale: float | None = None

    def __post_init__(self):
        if self.mode not in (COMPONENT, MAGNITUDE):
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        if self.mode == COMPONENT:
            if any(x is None for x in (self.vel_mean, self.vel_std, self.acc_mean, self.acc_std)):
                raise ValueError("component mode needs per-component mean/std")
            if np.any(self.vel_std <= 0) or np.any(self.acc_std <= 0):
                raise ValueError("stds must be positive")
        else:
            if self.vel_scale is None or self.acc_scale is None:
                raise ValueError("magnitude mode needs scalar scales")
            if self.vel_scale <= 0 or self.acc_scale <= 0:
                raise ValueError("scales must be positive")

    def normalize_velocity(self, v: np.ndarray) -> np.ndarray:
        if self.mode == COMPONENT:
            return (v - self.vel_mean) / self.vel_std
        return v / self.vel_scale

    def normalize_accel(self, a: np.ndarray) -> np.ndarray:
        if self.mode == COMPONENT:
            return (a - self.acc_mean) / self.acc_std
        return a / self.acc_scale

    def denormalize_accel(self, a: np.ndarray) -> np.ndarray:
        if self.mode == COMPONENT:
            return a * self.acc_std + self.acc_mean
        return a * self.acc_scale

    def to_dict(self) -> dict:
        d = {"mode": self.mode}
        if self.mode == COMPONENT:
            d.update(
                vel_mean=self.vel_mean.tolist(),
                vel_std=self.vel_std.tolist(),
                acc_mean=self.acc_mean.tolist(),
                acc_std=self.acc_std.tolist(),
            )
        else:
            d.update(vel_scale=self.vel_scale, acc_scale=self.acc_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        if d["mode"] == COMPONENT:
            return cls(
                mode=COMPONENT,
                vel_mean=np.asarray(d["vel_mean"]),
                vel_std=np.asarray(d["vel_std"]),
                acc_mean=np.asarray(d["acc_mean"]),
                acc_std=np.asarray(d["acc_std"]),
            )
        return cls(mode=MAGNITUDE, vel_scale=d["vel_scale"], acc_scale=d["acc_scale"])


def compute_stats(position_sets, box: np.ndarray, mode: str) -> NormalizationStats:
    """Velocity/acceleration statistics over training trajectories.

    ``position_sets``: iterable of (F, N, 3) arrays. Velocities are frame
    finite differences under minimum image; accelerations second differences.
    """
    vels, accs = [], []
    for pos in position_sets:
        v = min_image(pos[1:] - pos[:-1], box)
        vels.append(v.reshape(-1, 3))
        accs.append((v[1:] - v[:-1]).reshape(-1, 3))
    v = np.concatenate(vels)
    a = np.concatenate(accs)
    if mode == COMPONENT:
        return NormalizationStats(
            mode=COMPONENT,
            vel_mean=v.mean(axis=0),
            vel_std=np.maximum(v.std(axis=0), 1e-12),
            acc_mean=a.mean(axis=0),
            acc_std=np.maximum(a.std(axis=0), 1e-12),
        )
    return NormalizationStats(
        mode=MAGNITUDE,
        vel_scale=float(max(np.linalg.norm(v, axis=1).std(), 1e-12)),
        acc_scale=float(max(np.linalg.norm(a, axis=1).std(), 1e-12)),
    )
