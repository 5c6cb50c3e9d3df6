"""Bit-exact on-disk formats: trajectories, checkpoints, run configs.

Trajectory layout (little-endian throughout):

    magic      4s   "LGTR"
    version    u16  (major; readers refuse unknown majors)
    particles  u32
    frames     u32
    frame_dt   f64
    box        3*f64
    scenario   u8   (0 = tgv, 1 = rpf)
    flags      u8   (bit0: velocities present)
    payload    frames * [positions f32 N*3 [, velocities f32 N*3]]
    meta_len   u32
    metadata   UTF-8 JSON of meta_len bytes

Checkpoints follow the same pattern: a fixed header, a JSON descriptor
(model config, parameter names/shapes, optimizer state tags), then raw
float64 arrays in descriptor order. Both formats round-trip bitwise.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .box import DomainSpec
from .sph import Trajectory

TRAJ_MAGIC = b"LGTR"
TRAJ_VERSION = 1
CKPT_MAGIC = b"LGCK"
CKPT_VERSION = 1

_SCENARIO_TAGS = {"tgv": 0, "rpf": 1}
_SCENARIO_NAMES = {v: k for k, v in _SCENARIO_TAGS.items()}


class FormatError(ValueError):
    pass


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_trajectory(path, traj: Trajectory):
    with_vel = traj.velocities is not None
    flags = 1 if with_vel else 0
    header = struct.pack(
        "<4sHIId3dBB",
        TRAJ_MAGIC,
        TRAJ_VERSION,
        traj.n_particles,
        traj.n_frames,
        traj.frame_dt,
        *traj.domain.lengths,
        _SCENARIO_TAGS[traj.scenario],
        flags,
    )
    meta = _json_bytes(traj.metadata)
    with open(path, "wb") as fh:
        fh.write(header)
        for k in range(traj.n_frames):
            fh.write(traj.positions[k].astype("<f4").tobytes())
            if with_vel:
                fh.write(traj.velocities[k].astype("<f4").tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def read_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        raw = fh.read()
    head_fmt = "<4sHIId3dBB"
    head_size = struct.calcsize(head_fmt)
    if len(raw) < head_size:
        raise FormatError("file too short for a trajectory header")
    magic, version, n, frames, frame_dt, bx, by, bz, tag, flags = struct.unpack_from(
        head_fmt, raw
    )
    if magic != TRAJ_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TRAJ_MAGIC!r}")
    if version != TRAJ_VERSION:
        raise FormatError(
            f"unsupported trajectory format version {version} (reader supports {TRAJ_VERSION})"
        )
    with_vel = bool(flags & 1)
    per_frame = n * 3 * 4 * (2 if with_vel else 1)
    payload_size = frames * per_frame
    offset = head_size
    if len(raw) < offset + payload_size + 4:
        raise FormatError("truncated trajectory payload")
    positions = np.empty((frames, n, 3))
    velocities = np.empty((frames, n, 3)) if with_vel else None
    for k in range(frames):
        pos = np.frombuffer(raw, dtype="<f4", count=n * 3, offset=offset)
        positions[k] = pos.reshape(n, 3)
        offset += n * 3 * 4
        if with_vel:
            vel = np.frombuffer(raw, dtype="<f4", count=n * 3, offset=offset)
            velocities[k] = vel.reshape(n, 3)
            offset += n * 3 * 4
    (meta_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    metadata = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
    return Trajectory(
        positions=positions,
        velocities=velocities,
        frame_dt=frame_dt,
        domain=DomainSpec((bx, by, bz)),
        scenario=_SCENARIO_NAMES[tag],
        metadata=metadata,
    )


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(
    path,
    model_config: dict,
    params: dict[str, np.ndarray],
    opt_state: dict | None = None,
    extra: dict | None = None,
):
    """``params``: name -> float64 array. ``opt_state``: {"m": {...}, "v":
    {...}, "step": int} or None."""
    names = sorted(params)
    entries = [{"name": k, "shape": list(params[k].shape)} for k in names]
    header = {
        "model": model_config,
        "params": entries,
        "has_opt": opt_state is not None,
        "opt_step": 0 if opt_state is None else int(opt_state["step"]),
        "extra": extra or {},
    }
    blob = _json_bytes(header)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sH", CKPT_MAGIC, CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
        if opt_state is not None:
            for group in ("m", "v"):
                for k in names:
                    fh.write(
                        np.ascontiguousarray(opt_state[group][k], dtype="<f8").tobytes()
                    )


def read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version = struct.unpack_from("<4sH", raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(
            f"unsupported checkpoint version {version} (reader supports {CKPT_VERSION})"
        )
    (hlen,) = struct.unpack_from("<I", raw, 6)
    offset = 10
    header = json.loads(raw[offset : offset + hlen].decode("utf-8"))
    offset += hlen

    def read_group():
        out = {}
        nonlocal offset
        for e in header["params"]:
            shape = tuple(e["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            out[e["name"]] = arr.reshape(shape).copy()
            offset += count * 8
        return out

    params = read_group()
    opt_state = None
    if header["has_opt"]:
        m = read_group()
        v = read_group()
        opt_state = {"m": m, "v": v, "step": header["opt_step"]}
    return header["model"], params, opt_state, header.get("extra", {})


# ---------------------------------------------------------------------------
# run configuration (strict JSON)


@dataclass
class RunConfig:
    """Validated run document: scenario + dataset split + model + training.

    Unknown keys anywhere are rejected so that typos fail loudly; every
    solver/training default is serialized back out, making runs
    self-describing.
    """

    scenario: dict
    dataset: dict
    model: dict
    training: dict
    evaluate: dict
    seed: int

    _SCENARIO_KEYS = {
        "name", "dx", "u_ref", "length_ref", "viscosity", "dt", "stride",
        "frames", "warmup", "jitter", "rpf_force", "c0_factor",
        "bg_pressure_factor", "relax_steps", "relax_damping",
    }
    _DATASET_KEYS = {"n_train", "n_valid", "n_test"}
    _MODEL_KEYS = {"kind", "hidden", "layers", "history", "force_in_attributes", "radius"}
    _TRAINING_KEYS = {
        "steps", "batch_size", "lr", "lr_final", "noise_std",
        "pushforward_steps", "pushforward_base", "pushforward_warmup_frac",
        "val_every", "val_samples", "val_rollout_steps",
    }
    _EVALUATE_KEYS = {"rollout_steps", "sinkhorn_eps", "sinkhorn_max_iters", "sinkhorn_tol"}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        allowed_top = {"scenario", "dataset", "model", "training", "evaluate", "seed"}
        _check_keys("top level", doc, allowed_top)
        sections = {}
        for section, allowed in (
            ("scenario", cls._SCENARIO_KEYS),
            ("dataset", cls._DATASET_KEYS),
            ("model", cls._MODEL_KEYS),
            ("training", cls._TRAINING_KEYS),
            ("evaluate", cls._EVALUATE_KEYS),
        ):
            got = doc.get(section, {})
            if not isinstance(got, dict):
                raise FormatError(f"section {section!r} must be an object")
            _check_keys(section, got, allowed)
            sections[section] = dict(got)
        seed = doc.get("seed", 0)
        if not isinstance(seed, int):
            raise FormatError("seed must be an integer")
        cfg = cls(seed=seed, **sections)
        cfg._apply_defaults()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def _apply_defaults(self):
        from .sph import ScenarioConfig

        sc = dict(self.scenario)
        name = sc.pop("name", "tgv")
        if name not in ("tgv", "rpf"):
            raise FormatError(f"scenario.name must be tgv or rpf, got {name!r}")
        domain = DomainSpec((1.0, 1.0, 1.0)) if name == "tgv" else DomainSpec((1.0, 2.0, 0.5))
        defaults = ScenarioConfig(scenario=name, domain=domain, dx=sc.get("dx", 0.05))
        self.scenario = {
            "name": name,
            "dx": defaults.dx,
            "u_ref": sc.get("u_ref", defaults.u_ref),
            "length_ref": sc.get("length_ref", defaults.length_ref),
            "viscosity": sc.get("viscosity", defaults.viscosity),
            "dt": sc.get("dt", defaults.dt),
            "stride": sc.get("stride", defaults.stride),
            "frames": sc.get("frames", defaults.frames),
            "warmup": sc.get("warmup", 10.0 if name == "rpf" else 0.0),
            "jitter": sc.get("jitter", defaults.jitter),
            "rpf_force": sc.get("rpf_force", defaults.rpf_force),
            "c0_factor": sc.get("c0_factor", defaults.c0_factor),
            "bg_pressure_factor": sc.get("bg_pressure_factor", defaults.bg_pressure_factor),
            "relax_steps": sc.get("relax_steps", defaults.relax_steps),
            "relax_damping": sc.get("relax_damping", defaults.relax_damping),
        }
        self.dataset = {
            "n_train": self.dataset.get("n_train", 2),
            "n_valid": self.dataset.get("n_valid", 1),
            "n_test": self.dataset.get("n_test", 1),
        }
        self.model = {
            "kind": self.model.get("kind", "segnn-avg"),
            "hidden": self.model.get("hidden", 64),
            "layers": self.model.get("layers", 10),
            "history": self.model.get("history", 5),
            "force_in_attributes": self.model.get("force_in_attributes", False),
            "radius": self.model.get("radius", 1.5 * self.scenario["dx"]),
        }
        self.training = {
            "steps": self.training.get("steps", 2000),
            "batch_size": self.training.get("batch_size", 2),
            "lr": self.training.get("lr", 1e-3),
            "lr_final": self.training.get("lr_final", 1e-5),
            "noise_std": self.training.get("noise_std", 3e-4),
            "pushforward_steps": self.training.get("pushforward_steps", 5),
            "pushforward_base": self.training.get("pushforward_base", 0.5),
            "pushforward_warmup_frac": self.training.get("pushforward_warmup_frac", 0.25),
            "val_every": self.training.get("val_every", 100),
            "val_samples": self.training.get("val_samples", 16),
            "val_rollout_steps": self.training.get("val_rollout_steps", 20),
        }
        self.evaluate = {
            "rollout_steps": self.evaluate.get("rollout_steps", 100),
            "sinkhorn_eps": self.evaluate.get("sinkhorn_eps", 1e-3),
            "sinkhorn_max_iters": self.evaluate.get("sinkhorn_max_iters", 500),
            "sinkhorn_tol": self.evaluate.get("sinkhorn_tol", 1e-6),
        }

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "dataset": self.dataset,
            "model": self.model,
            "training": self.training,
            "evaluate": self.evaluate,
            "seed": self.seed,
        }

    def scenario_config(self):
        from .sph import ScenarioConfig

        sc = dict(self.scenario)
        name = sc.pop("name")
        domain = DomainSpec((1.0, 1.0, 1.0)) if name == "tgv" else DomainSpec((1.0, 2.0, 0.5))
        return ScenarioConfig(scenario=name, domain=domain, **sc)

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(
            model=self.model["kind"],
            history=self.model["history"],
            hidden=self.model["hidden"],
            layers=self.model["layers"],
            force_in_attributes=self.model["force_in_attributes"],
            radius=self.model["radius"],
            seed=self.seed,
            **self.training,
        )


def _check_keys(section: str, doc: dict, allowed: set):
    unknown = set(doc) - allowed
    if unknown:
        raise FormatError(f"unknown keys in {section}: {sorted(unknown)}")


def write_csv(path, header: list[str], rows):
    """Comma-separated, '.' decimal, one header row."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x) for x in row) + "\n")
