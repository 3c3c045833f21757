"""Shared domain types, normalization, seeded RNG, and dataset serialization.

Everything downstream (simulator, annotation, sampling, policy, controller)
builds on the value types defined here. All types are immutable after
construction and safe to share across threads by copy.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest"
MANIFEST_VERSION = 1
STD_FLOOR = 1e-6


class CoreError(Exception):
    """Base error for invariant violations and malformed data."""


class ValidationError(CoreError):
    pass


class DatasetError(CoreError):
    pass


class BehaviorMode(IntEnum):
    FORWARD = 0
    ROLLBACK = 1
    ADVANCE = 2


def as_contact(value) -> int:
    """Validate and coerce a binary contact flag."""
    v = int(value)
    if v not in (0, 1):
        raise ValidationError(f"contact state must be 0 or 1, got {value!r}")
    return v


@dataclass(frozen=True)
class TaskId:
    id: int
    text: str

    def __post_init__(self):
        if self.id < 0:
            raise ValidationError(f"task id must be non-negative, got {self.id}")
        if not self.text:
            raise ValidationError("task text must be non-empty")


@dataclass(frozen=True)
class JointVector:
    """Joint angles (radians) plus a scalar gripper opening in [0, 1]."""

    joints: tuple
    gripper: float

    def __post_init__(self):
        joints = tuple(float(j) for j in self.joints)
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "gripper", float(self.gripper))
        if not all(math.isfinite(j) for j in joints):
            raise ValidationError(f"non-finite joint value in {joints}")
        if not (0.0 <= self.gripper <= 1.0):
            raise ValidationError(f"gripper must be in [0, 1], got {self.gripper}")

    @property
    def dof(self) -> int:
        return len(self.joints)

    def vec(self) -> np.ndarray:
        """Flat [joints..., gripper] float64 vector (the on-wire action layout)."""
        return np.array([*self.joints, self.gripper], dtype=np.float64)

    @staticmethod
    def from_vec(v) -> "JointVector":
        v = np.asarray(v, dtype=np.float64)
        return JointVector(joints=tuple(v[:-1]), gripper=float(v[-1]))


@dataclass(frozen=True)
class Observation:
    features: tuple

    def __post_init__(self):
        feats = tuple(float(x) for x in self.features)
        object.__setattr__(self, "features", feats)
        if not all(math.isfinite(x) for x in feats):
            raise ValidationError("non-finite observation feature")

    @property
    def dim(self) -> int:
        return len(self.features)

    def vec(self) -> np.ndarray:
        return np.array(self.features, dtype=np.float64)


@dataclass(frozen=True)
class ConditionTuple:
    """Instruction context fed to the policy: current/previous task + prior contact."""

    l_cur: int
    l_pre: int
    c_pre: int

    def __post_init__(self):
        object.__setattr__(self, "c_pre", as_contact(self.c_pre))
        if self.l_cur < 0 or self.l_pre < 0:
            raise ValidationError("task ids must be non-negative")


@dataclass(frozen=True)
class Step:
    t: int
    obs: Observation
    action: JointVector
    contact_true: int
    contact_label: int | None = None

    def __post_init__(self):
        if self.t < 0:
            raise ValidationError(f"step index must be >= 0, got {self.t}")
        object.__setattr__(self, "contact_true", as_contact(self.contact_true))
        if self.contact_label is not None:
            object.__setattr__(self, "contact_label", as_contact(self.contact_label))


@dataclass(frozen=True)
class Episode:
    task_id: int
    seed: int
    steps: tuple

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) < 2:
            raise ValidationError("episode must have at least 2 steps")
        for i, s in enumerate(self.steps):
            if s.t != i:
                raise ValidationError(
                    f"step indices must be dense 0..N-1, got t={s.t} at position {i}"
                )

    def __len__(self) -> int:
        return len(self.steps)

    def with_contact_labels(self, labels) -> "Episode":
        if len(labels) != len(self.steps):
            raise ValidationError("label array length mismatch")
        steps = tuple(
            Step(s.t, s.obs, s.action, s.contact_true, as_contact(c))
            for s, c in zip(self.steps, labels)
        )
        return Episode(self.task_id, self.seed, steps)


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean/std for observation and action vectors. std floored."""

    obs_mean: np.ndarray
    obs_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def __post_init__(self):
        for name in ("obs_mean", "obs_std", "action_mean", "action_std"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "obs_std", np.maximum(self.obs_std, STD_FLOOR))
        object.__setattr__(self, "action_std", np.maximum(self.action_std, STD_FLOOR))

    @staticmethod
    def from_arrays(obs: np.ndarray, actions: np.ndarray) -> "NormStats":
        return NormStats(
            obs_mean=obs.mean(axis=0),
            obs_std=obs.std(axis=0),
            action_mean=actions.mean(axis=0),
            action_std=actions.std(axis=0),
        )

    def to_json(self) -> dict:
        return {
            "obs_mean": self.obs_mean.tolist(),
            "obs_std": self.obs_std.tolist(),
            "action_mean": self.action_mean.tolist(),
            "action_std": self.action_std.tolist(),
        }

    @staticmethod
    def from_json(d: dict) -> "NormStats":
        return NormStats(
            obs_mean=np.array(d["obs_mean"]),
            obs_std=np.array(d["obs_std"]),
            action_mean=np.array(d["action_mean"]),
            action_std=np.array(d["action_std"]),
        )


def normalize(vec: np.ndarray, stats: NormStats, which: str) -> np.ndarray:
    mean, std = _pick_stats(stats, which)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != mean.shape[0]:
        raise ValidationError(
            f"{which} vector has dim {vec.shape[-1]}, stats expect {mean.shape[0]}"
        )
    return (vec - mean) / std


def denormalize(vec: np.ndarray, stats: NormStats, which: str) -> np.ndarray:
    mean, std = _pick_stats(stats, which)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != mean.shape[0]:
        raise ValidationError(
            f"{which} vector has dim {vec.shape[-1]}, stats expect {mean.shape[0]}"
        )
    return vec * std + mean


def _pick_stats(stats: NormStats, which: str):
    if which == "obs":
        return stats.obs_mean, stats.obs_std
    if which == "action":
        return stats.action_mean, stats.action_std
    raise ValidationError(f"which must be 'obs' or 'action', got {which!r}")


# ---------------------------------------------------------------------------
# Seeded, splittable RNG. Child streams are derived from a root seed plus a
# list of string names, so every stochastic operation can own an independent,
# reproducible generator.
# ---------------------------------------------------------------------------

def derive_seed(seed: int, *names) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


# ---------------------------------------------------------------------------
# Dataset on disk: a directory holding a `manifest` file (UTF-8 JSON) and one
# newline-delimited JSON file per episode. Floats survive the round trip
# bit-exactly (json uses repr, the shortest exact representation).
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    version: int
    control_hz: float
    tasks: list          # [{id, text, kind, object, zone}]
    obs_dim: int
    dof: int
    gripper_index: int   # index of the gripper value inside obs features
    norm_stats: NormStats
    episodes: list       # [{file, task_id, seed, length}]
    scene: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def action_dim(self) -> int:
        return self.dof + 1

    def task_ids(self) -> list:
        return [TaskId(t["id"], t["text"]) for t in self.tasks]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "control_hz": self.control_hz,
            "tasks": self.tasks,
            "obs_dim": self.obs_dim,
            "dof": self.dof,
            "gripper_index": self.gripper_index,
            "norm_stats": self.norm_stats.to_json(),
            "episodes": self.episodes,
            "scene": self.scene,
            "provenance": self.provenance,
        }

    @staticmethod
    def from_json(d: dict) -> "DatasetManifest":
        if d.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {d.get('version')!r}")
        return DatasetManifest(
            version=d["version"],
            control_hz=d["control_hz"],
            tasks=d["tasks"],
            obs_dim=d["obs_dim"],
            dof=d["dof"],
            gripper_index=d["gripper_index"],
            norm_stats=NormStats.from_json(d["norm_stats"]),
            episodes=d["episodes"],
            scene=d.get("scene", {}),
            provenance=d.get("provenance", {}),
        )


def _step_record(step: Step, task_id: int) -> dict:
    return {
        "t": step.t,
        "obs": list(step.obs.features),
        "action": list(step.action.joints),
        "gripper": step.action.gripper,
        "contact_true": step.contact_true,
        "contact_label": step.contact_label,
        "task_id": task_id,
    }


def _step_from_record(rec: dict, manifest: DatasetManifest, where: str) -> Step:
    obs = rec["obs"]
    if len(obs) != manifest.obs_dim:
        raise DatasetError(
            f"{where}: obs has dim {len(obs)}, manifest declares {manifest.obs_dim}"
        )
    if len(rec["action"]) != manifest.dof:
        raise DatasetError(
            f"{where}: action has dim {len(rec['action'])}, manifest declares {manifest.dof}"
        )
    try:
        return Step(
            t=rec["t"],
            obs=Observation(obs),
            action=JointVector(rec["action"], rec["gripper"]),
            contact_true=rec["contact_true"],
            contact_label=rec["contact_label"],
        )
    except ValidationError as e:
        raise DatasetError(f"{where}: {e}") from e


def save_dataset(path, manifest: DatasetManifest, episodes) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    for i, ep in enumerate(episodes):
        fname = f"episode_{i:05d}.jsonl"
        with open(root / fname, "w", encoding="utf-8") as f:
            for step in ep.steps:
                f.write(json.dumps(_step_record(step, ep.task_id)) + "\n")
        index.append(
            {"file": fname, "task_id": ep.task_id, "seed": ep.seed, "length": len(ep)}
        )
    manifest.episodes = index
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest.to_json(), f, indent=1)
        f.write("\n")


def load_dataset(path):
    """Load (manifest, episodes) from a dataset directory, validating invariants."""
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise DatasetError(f"no manifest at {mpath}")
    with open(mpath, encoding="utf-8") as f:
        manifest = DatasetManifest.from_json(json.load(f))
    episodes = []
    for entry in manifest.episodes:
        fpath = root / entry["file"]
        steps = []
        with open(fpath, encoding="utf-8") as f:
            for lineno, line in enumerate(f):
                if not line.strip():
                    continue
                where = f"{entry['file']}:{lineno + 1}"
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DatasetError(f"{where}: malformed record ({e})") from e
                if rec["task_id"] != entry["task_id"]:
                    raise DatasetError(
                        f"{where}: task_id {rec['task_id']} != index entry {entry['task_id']}"
                    )
                steps.append(_step_from_record(rec, manifest, where))
        try:
            ep = Episode(task_id=entry["task_id"], seed=entry["seed"], steps=steps)
        except ValidationError as e:
            raise DatasetError(f"{entry['file']}: {e}") from e
        if len(ep) != entry["length"]:
            raise DatasetError(
                f"{entry['file']}: length {len(ep)} != index entry {entry['length']}"
            )
        episodes.append(ep)
    return manifest, episodes


def canonical_json(obj) -> str:
    """Stable serialization used for digests and byte-identical artifacts."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest_json(obj) -> str:
    return "sha256:" + hashlib.sha256(canonical_json(obj).encode()).hexdigest()
