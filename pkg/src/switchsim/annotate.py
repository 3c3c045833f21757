"""Contact-label acquisition: noisy sparse oracle, gripper fusion, 1D
nearest-neighbor imputation, sliding-window mode filtering, and accuracy
reporting against simulator ground truth.

The oracle stands in for an external vision-language labeler: it reads the
true contact flag at a subsampled set of steps and flips each answer
independently with a configured probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DatasetManifest,
    Episode,
    ValidationError,
    as_contact,
    make_rng,
)

FULLY_OPEN = 0.9


class AnnotateError(Exception):
    pass


@dataclass(frozen=True)
class OracleConfig:
    query_hz: float = 1.0 / 3.0   # oracle queries per second of trajectory time
    flip_prob: float = 0.2
    window: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.query_hz <= 0:
            raise ValidationError(f"query_hz must be > 0, got {self.query_hz}")
        if not (0.0 <= self.flip_prob < 0.5):
            raise ValidationError(f"flip_prob must be in [0, 0.5), got {self.flip_prob}")


@dataclass(frozen=True)
class SparseLabels:
    """Ordered (step index, label) pairs at the queried steps."""

    entries: tuple

    def __post_init__(self):
        entries = tuple((int(i), as_contact(c)) for i, c in self.entries)
        object.__setattr__(self, "entries", entries)
        idx = [i for i, _ in entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValidationError("sparse label indices must be strictly increasing")
        if any(i < 0 for i in idx):
            raise ValidationError("sparse label indices must be non-negative")

    def indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.entries], dtype=np.int64)

    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.entries], dtype=np.int64)


def query_indices(length: int, control_hz: float, query_hz: float) -> np.ndarray:
    """Floor-spaced query positions: one per 1/query_hz seconds of trajectory."""
    stride = max(1, int(np.floor(control_hz / query_hz)))
    return np.arange(0, length, stride, dtype=np.int64)


def query_oracle(episode: Episode, cfg: OracleConfig, control_hz: float, rng) -> SparseLabels:
    idx = query_indices(len(episode), control_hz, cfg.query_hz)
    entries = []
    for i in idx:
        truth = episode.steps[i].contact_true
        flip = rng.random() < cfg.flip_prob
        entries.append((int(i), truth ^ 1 if flip else truth))
    return SparseLabels(tuple(entries))


def fuse_gripper(labels: SparseLabels, episode: Episode, gripper_index: int) -> SparseLabels:
    """Force contact=1 answers to 0 wherever the gripper is fully open.

    A fully open gripper cannot be touching anything, so this removes oracle
    false positives. 0-labels are never promoted.
    """
    entries = []
    for i, c in labels.entries:
        grip = episode.steps[i].obs.features[gripper_index]
        if c == 1 and grip >= FULLY_OPEN:
            c = 0
        entries.append((i, c))
    return SparseLabels(tuple(entries))


def impute_nn_1d(labels: SparseLabels, length: int) -> np.ndarray:
    """Dense labels by nearest queried index; ties go to the earlier index."""
    if len(labels.entries) == 0:
        raise AnnotateError("cannot impute from an empty sparse label set")
    idx = labels.indices()
    if length < idx[-1] + 1:
        raise AnnotateError(f"length {length} < max queried index {idx[-1]}")
    lab = labels.labels()
    out = np.empty(length, dtype=np.int64)
    for i in range(length):
        dist = np.abs(idx - i)
        out[i] = lab[int(np.argmin(dist))]  # argmin returns first = earlier index on tie
    return out


def mode_filter(dense, window: int) -> np.ndarray:
    """Sliding-window mode with truncation at the array edges.

    A tie in the (edge-truncated, even-sized) window keeps the center label.
    """
    if window % 2 == 0 or window < 1:
        raise AnnotateError(f"window must be odd and >= 1, got {window}")
    x = np.asarray(dense, dtype=np.int64)
    half = window // 2
    n = len(x)
    out = np.empty_like(x)
    for i in range(n):
        w = x[max(0, i - half): min(n, i + half + 1)]
        ones = int(w.sum())
        zeros = len(w) - ones
        if ones > zeros:
            out[i] = 1
        elif zeros > ones:
            out[i] = 0
        else:
            out[i] = x[i]
    return out


def annotate_episode(
    episode: Episode, cfg: OracleConfig, control_hz: float, gripper_index: int, rng
) -> Episode:
    sparse = query_oracle(episode, cfg, control_hz, rng)
    sparse = fuse_gripper(sparse, episode, gripper_index)
    dense = impute_nn_1d(sparse, len(episode))
    dense = mode_filter(dense, cfg.window)
    return episode.with_contact_labels(dense)


def annotate_dataset(manifest: DatasetManifest, episodes, cfg: OracleConfig):
    """Run the full labeling pipeline over every episode.

    Returns (annotated episodes, accuracy report). Per-episode RNG streams are
    derived from cfg.seed, so annotation order never matters.
    """
    annotated = []
    for k, ep in enumerate(episodes):
        rng = make_rng(cfg.seed, "annotate", k)
        try:
            annotated.append(
                annotate_episode(ep, cfg, manifest.control_hz, manifest.gripper_index, rng)
            )
        except AnnotateError as e:
            raise AnnotateError(f"episode {k} (task {ep.task_id}): {e}") from e
    return annotated, accuracy_report(manifest, annotated)


def accuracy_report(manifest: DatasetManifest, episodes) -> dict:
    """Per-task and mean contact-label accuracy versus ground truth (%)."""
    per_task_hits: dict = {}
    per_task_total: dict = {}
    for ep in episodes:
        hits = sum(
            1 for s in ep.steps if s.contact_label is not None and s.contact_label == s.contact_true
        )
        per_task_hits[ep.task_id] = per_task_hits.get(ep.task_id, 0) + hits
        per_task_total[ep.task_id] = per_task_total.get(ep.task_id, 0) + len(ep)
    per_task = {
        str(tid): 100.0 * per_task_hits[tid] / per_task_total[tid]
        for tid in sorted(per_task_hits)
    }
    total = sum(per_task_total.values())
    average = 100.0 * sum(per_task_hits.values()) / total if total else 0.0
    return {"per_task": per_task, "average": average}
