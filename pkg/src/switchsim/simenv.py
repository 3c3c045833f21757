"""Deterministic 2D planar-arm world with pick/place/push tasks.

The world is a [-1, 1]^2 tabletop seen from above. A 3-link arm with a scalar
gripper manipulates disc objects into target zones. Stepping is a pure
function of (state, action), so episode generation and evaluation replay
bit-exactly from a seed. Scripted waypoint experts provide demonstrations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (
    DatasetManifest,
    Episode,
    JointVector,
    MANIFEST_VERSION,
    NormStats,
    Observation,
    Step,
    ValidationError,
    make_rng,
)

GRASP_RADIUS = 0.05
TOUCH_RADIUS = 0.07
ZONE_TOLERANCE = 0.08
GRIPPER_CLOSED_BELOW = 0.5
CONTROL_HZ = 15.0


class GenerationError(Exception):
    """Raised when the scripted expert cannot produce a valid episode."""


@dataclass(frozen=True)
class ArmConfig:
    link_lengths: tuple = (0.5, 0.4, 0.3)
    base: tuple = (0.0, 0.0)
    joint_limits: tuple = ((-3.1, 3.1), (-3.1, 3.1), (-3.1, 3.1))
    max_joint_step: float = 0.15

    def __post_init__(self):
        if any(l <= 0 for l in self.link_lengths):
            raise ValidationError("link lengths must be positive")
        if any(lo >= hi for lo, hi in self.joint_limits):
            raise ValidationError("joint limits must satisfy lo < hi")
        if self.max_joint_step <= 0:
            raise ValidationError("max joint step must be positive")

    @property
    def dof(self) -> int:
        return len(self.link_lengths)

    @property
    def span(self) -> float:
        return sum(self.link_lengths)


@dataclass(frozen=True)
class Obj:
    id: str
    pos: tuple
    radius: float
    held: bool = False


@dataclass(frozen=True)
class Zone:
    id: str
    pos: tuple
    radius: float


@dataclass(frozen=True)
class WorldState:
    joints: JointVector
    objects: tuple
    zones: tuple
    tick: int = 0

    def object_by_id(self, oid: str) -> Obj:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def zone_by_id(self, zid: str) -> Zone:
        for z in self.zones:
            if z.id == zid:
                return z
        raise KeyError(zid)

    @property
    def held_object(self) -> Obj | None:
        for o in self.objects:
            if o.held:
                return o
        return None


@dataclass(frozen=True)
class TaskSpec:
    id: int
    text: str
    kind: str          # "pick_place" | "push"
    object_id: str
    zone_id: str
    tolerance: float = ZONE_TOLERANCE

    def __post_init__(self):
        if self.kind not in ("pick_place", "push"):
            raise ValidationError(f"unknown task kind {self.kind!r}")


# Objects and zones live on an annulus around the base so every waypoint and
# push path stays well inside the arm's dexterous band.
DEFAULT_SCENE = {
    "arm": {
        "link_lengths": [0.5, 0.4, 0.3],
        "base": [0.0, 0.0],
        "joint_limits": [[-3.1, 3.1], [-3.1, 3.1], [-3.1, 3.1]],
        "max_joint_step": 0.08,
    },
    "objects": [
        {"id": "A", "pos": [0.68, 0.32], "radius": 0.06},
        {"id": "B", "pos": [-0.53, 0.53], "radius": 0.06},
        {"id": "C", "pos": [-0.74, -0.13], "radius": 0.06},
    ],
    "zones": [
        {"id": "z1", "pos": [0.26, -0.70], "radius": 0.10},
        {"id": "z2", "pos": [0.13, 0.74], "radius": 0.10},
    ],
    "tasks": [
        {"id": 0, "text": "pick up object A and place it in zone one", "kind": "pick_place", "object": "A", "zone": "z1"},
        {"id": 1, "text": "pick up object B and place it in zone one", "kind": "pick_place", "object": "B", "zone": "z1"},
        {"id": 2, "text": "pick up object C and place it in zone two", "kind": "pick_place", "object": "C", "zone": "z2"},
        {"id": 3, "text": "push object A into zone two", "kind": "push", "object": "A", "zone": "z2"},
    ],
    "placement_jitter": 0.10,
    "start_jitter": 0.04,
    "control_hz": CONTROL_HZ,
}


def load_scene(path=None) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULT_SCENE))
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def arm_from_scene(scene: dict) -> ArmConfig:
    a = scene["arm"]
    return ArmConfig(
        link_lengths=tuple(a["link_lengths"]),
        base=tuple(a["base"]),
        joint_limits=tuple(tuple(l) for l in a["joint_limits"]),
        max_joint_step=a["max_joint_step"],
    )


def tasks_from_scene(scene: dict) -> list:
    return [
        TaskSpec(t["id"], t["text"], t["kind"], t["object"], t["zone"])
        for t in scene["tasks"]
    ]


def forward_kinematics(config: ArmConfig, joints) -> np.ndarray:
    """End-effector position of the planar chain (cumulative angle sums)."""
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape[0] != config.dof:
        raise ValidationError(f"expected {config.dof} joints, got {joints.shape[0]}")
    angles = np.cumsum(joints)
    x = config.base[0] + np.sum(np.array(config.link_lengths) * np.cos(angles))
    y = config.base[1] + np.sum(np.array(config.link_lengths) * np.sin(angles))
    return np.array([x, y])


def _jacobian(config: ArmConfig, joints) -> np.ndarray:
    angles = np.cumsum(np.asarray(joints, dtype=np.float64))
    lengths = np.array(config.link_lengths)
    J = np.zeros((2, config.dof))
    for i in range(config.dof):
        # joint i rotates links i..n-1
        J[0, i] = -np.sum(lengths[i:] * np.sin(angles[i:]))
        J[1, i] = np.sum(lengths[i:] * np.cos(angles[i:]))
    return J


_IK_RESTARTS = (
    (0.3, 0.3, 0.3),
    (1.6, 0.5, 0.4),
    (-1.6, -0.5, -0.4),
    (2.6, 0.4, 0.3),
    (-2.6, -0.4, -0.3),
)


def _ik_descend(config: ArmConfig, target, q_init, iters: int, damping: float):
    q = np.asarray(q_init, dtype=np.float64).copy()
    lo = np.array([l for l, _ in config.joint_limits])
    hi = np.array([h for _, h in config.joint_limits])
    for _ in range(iters):
        err = target - forward_kinematics(config, q)
        if np.linalg.norm(err) < 1e-6:
            break
        J = _jacobian(config, q)
        JJt = J @ J.T + damping * np.eye(2)
        dq = J.T @ np.linalg.solve(JJt, err)
        step_norm = np.linalg.norm(dq)
        if step_norm > 0.2:
            dq *= 0.2 / step_norm
        q = np.clip(q + dq, lo, hi)
    return q, np.linalg.norm(target - forward_kinematics(config, q))


def ik_solve(config: ArmConfig, target, q_init, iters: int = 300, damping: float = 1e-3):
    """Damped-least-squares IK for a 2D point target. Deterministic.

    Falls back to a fixed list of restart configurations when the warm start
    stalls (joint limits can trap DLS on far-side targets)."""
    target = np.asarray(target, dtype=np.float64)
    q, err = _ik_descend(config, target, q_init, iters, damping)
    if err < 1e-5:
        return q
    best_q, best_err = q, err
    for restart in _IK_RESTARTS:
        if len(restart) != config.dof:
            restart = tuple(np.resize(restart, config.dof))
        q, err = _ik_descend(config, target, restart, iters, damping)
        if err < best_err:
            best_q, best_err = q, err
        if best_err < 1e-5:
            break
    return best_q


def gripper_closed(value: float) -> bool:
    return value < GRIPPER_CLOSED_BELOW


def step(world: WorldState, action: JointVector, config: ArmConfig) -> WorldState:
    """Advance the world one tick. Pure and deterministic.

    Joint motion toward the commanded target is clamped per-joint by
    max_joint_step and the joint limits. The gripper takes the commanded
    value directly. Grasping requires an open->closed transition within
    GRASP_RADIUS of an object; a closed gripper sweeping through a free
    object's disc pushes it.
    """
    if action.dof != config.dof:
        raise ValidationError(f"action dof {action.dof} != arm dof {config.dof}")
    q = np.array(world.joints.joints)
    target = np.array(action.joints)
    lo = np.array([l for l, _ in config.joint_limits])
    hi = np.array([h for _, h in config.joint_limits])
    delta = np.clip(np.clip(target, lo, hi) - q, -config.max_joint_step, config.max_joint_step)
    q_new = q + delta

    grip_old = world.joints.gripper
    grip_new = min(1.0, max(0.0, action.gripper))
    ee = forward_kinematics(config, q_new)

    was_closed = gripper_closed(grip_old)
    now_closed = gripper_closed(grip_new)

    objects = list(world.objects)
    held_idx = next((i for i, o in enumerate(objects) if o.held), None)

    if held_idx is not None:
        if now_closed:
            objects[held_idx] = replace(objects[held_idx], pos=(ee[0], ee[1]))
        else:
            # release: drop at current end-effector position
            objects[held_idx] = replace(objects[held_idx], pos=(ee[0], ee[1]), held=False)
            held_idx = None
    elif now_closed and not was_closed:
        # grasp attempt on the open->closed transition
        dists = [np.hypot(o.pos[0] - ee[0], o.pos[1] - ee[1]) for o in objects]
        nearest = int(np.argmin(dists))
        if dists[nearest] <= GRASP_RADIUS:
            objects[nearest] = replace(objects[nearest], pos=(ee[0], ee[1]), held=True)
            held_idx = nearest

    if held_idx is None and now_closed:
        # push: closed gripper inside a free object's disc displaces it outward
        for i, o in enumerate(objects):
            if o.held:
                continue
            dx, dy = o.pos[0] - ee[0], o.pos[1] - ee[1]
            d = np.hypot(dx, dy)
            if d < o.radius:
                if d < 1e-12:
                    dx, dy, d = 1.0, 0.0, 1.0
                scale = o.radius / d
                objects[i] = replace(o, pos=(ee[0] + dx * scale, ee[1] + dy * scale))

    return WorldState(
        joints=JointVector(tuple(q_new), grip_new),
        objects=tuple(objects),
        zones=world.zones,
        tick=world.tick + 1,
    )


def contact_truth(world: WorldState, config: ArmConfig) -> int:
    """1 iff an object is held, or the closed gripper is within touch radius."""
    if world.held_object is not None:
        return 1
    if not gripper_closed(world.joints.gripper):
        return 0
    ee = forward_kinematics(config, world.joints.joints)
    for o in world.objects:
        if np.hypot(o.pos[0] - ee[0], o.pos[1] - ee[1]) <= TOUCH_RADIUS:
            return 1
    return 0


def success(task: TaskSpec, world: WorldState) -> bool:
    obj = world.object_by_id(task.object_id)
    zone = world.zone_by_id(task.zone_id)
    dist = np.hypot(obj.pos[0] - zone.pos[0], obj.pos[1] - zone.pos[1])
    if task.kind == "pick_place":
        return dist <= task.tolerance and not obj.held
    return dist <= task.tolerance


def observe(world: WorldState, config: ArmConfig) -> Observation:
    """State-feature observation: joints, gripper, ee, object and zone positions."""
    ee = forward_kinematics(config, world.joints.joints)
    feats = [*world.joints.joints, world.joints.gripper, ee[0], ee[1]]
    for o in world.objects:
        feats.extend(o.pos)
    for z in world.zones:
        feats.extend(z.pos)
    return Observation(feats)


def obs_dim(scene: dict) -> int:
    arm = arm_from_scene(scene)
    return arm.dof + 1 + 2 + 2 * len(scene["objects"]) + 2 * len(scene["zones"])


def gripper_feature_index(scene: dict) -> int:
    return arm_from_scene(scene).dof


# ---------------------------------------------------------------------------
# Scene instantiation and the scripted expert
# ---------------------------------------------------------------------------

def _staging_point(scene: dict, task: TaskSpec, world: WorldState) -> np.ndarray:
    """Per-task ready position: partway from the base toward the task object."""
    obj = world.object_by_id(task.object_id)
    arm = arm_from_scene(scene)
    p = np.array(obj.pos) - np.array(arm.base)
    d = np.linalg.norm(p)
    return np.array(arm.base) + p / d * min(0.55 * arm.span, d * 0.6)


def canonical_start_joints(scene: dict, task: TaskSpec) -> np.ndarray:
    """Deterministic per-task start pose: IK to the staging point of the
    template scene from a fixed neutral configuration."""
    arm = arm_from_scene(scene)
    world = instantiate_scene(scene, rng=None)
    target = _staging_point(scene, task, world)
    neutral = np.full(arm.dof, 0.3)
    return ik_solve(arm, target, neutral)


def instantiate_scene(scene: dict, rng) -> WorldState:
    """Build a world from the scene template, optionally jittering placements.

    Objects keep a clearance from zone centers so no task starts solved, and
    from each other so grasps are unambiguous. rng=None gives the template
    positions exactly.
    """
    arm = arm_from_scene(scene)
    jitter = scene.get("placement_jitter", 0.0)
    zones = []
    for z in scene["zones"]:
        pos = np.array(z["pos"], dtype=np.float64)
        if rng is not None and jitter > 0:
            pos = pos + rng.uniform(-jitter / 2, jitter / 2, size=2)
        zones.append(Zone(z["id"], (pos[0], pos[1]), z["radius"]))
    objects = []
    for o in scene["objects"]:
        base_pos = np.array(o["pos"], dtype=np.float64)
        for attempt in range(200):
            pos = base_pos
            if rng is not None and jitter > 0:
                pos = base_pos + rng.uniform(-jitter, jitter, size=2)
            ok = (
                0.25 <= np.linalg.norm(pos - np.array(arm.base)) <= 0.92 * arm.span
                and all(np.linalg.norm(pos - np.array(z.pos)) >= 0.25 for z in zones)
                and all(
                    np.linalg.norm(pos - np.array(p.pos)) >= 0.18 for p in objects
                )
            )
            if ok:
                break
            if rng is None:
                raise ValidationError(f"template position for object {o['id']} violates clearances")
        else:
            raise GenerationError(f"could not place object {o['id']} after 200 tries")
        objects.append(Obj(o["id"], (pos[0], pos[1]), o["radius"]))
    start = JointVector(tuple(np.full(arm.dof, 0.3)), 1.0)
    return WorldState(joints=start, objects=tuple(objects), zones=tuple(zones), tick=0)


class _ExpertRun:
    """Closed-loop phase controller producing one expert episode.

    Commands always equal the next joint state (one-tick-reachable targets),
    which keeps the stored-action convention a_t = q_{t+1} exact.
    """

    MAX_TICKS = 800

    def __init__(self, task: TaskSpec, scene: dict, world: WorldState):
        self.task = task
        self.arm = arm_from_scene(scene)
        self.world = world
        self.steps = []
        self._q_target = None
        self._q_target_point = None

    @property
    def q(self):
        return np.array(self.world.joints.joints)

    @property
    def ee(self):
        return forward_kinematics(self.arm, self.world.joints.joints)

    def _command(self, point, grip, fresh_ik=False):
        """One tick toward the IK solution for `point`; records the step."""
        if (
            fresh_ik
            or self._q_target_point is None
            or np.linalg.norm(self._q_target_point - point) > 1e-9
        ):
            warm = self._q_target if self._q_target is not None else self.q
            self._q_target = ik_solve(self.arm, point, warm, iters=200)
            self._q_target_point = np.asarray(point, dtype=np.float64).copy()
        delta = np.clip(
            self._q_target - self.q, -self.arm.max_joint_step, self.arm.max_joint_step
        )
        cmd = JointVector(tuple(self.q + delta), grip)
        self.steps.append(
            Step(
                t=len(self.steps),
                obs=observe(self.world, self.arm),
                action=cmd,
                contact_true=contact_truth(self.world, self.arm),
            )
        )
        self.world = step(self.world, cmd, self.arm)
        if len(self.steps) > self.MAX_TICKS:
            raise GenerationError(f"expert exceeded {self.MAX_TICKS} ticks (task {self.task.id})")

    def hold(self, nticks, grip):
        for _ in range(nticks):
            self._command(self.ee, grip, fresh_ik=True)

    def move_to(self, point, grip, tol=0.01, max_ticks=300):
        point = np.asarray(point, dtype=np.float64)
        for _ in range(max_ticks):
            if np.linalg.norm(self.ee - point) <= tol:
                return
            self._command(point, grip)
        raise GenerationError(
            f"expert could not reach {point} within {max_ticks} ticks (task {self.task.id})"
        )

    def servo_push(self, max_ticks=400):
        """Chase the object, keeping the fist slightly inside its disc on the
        line away from the zone, until the object sits in the zone."""
        zone = self.world.zone_by_id(self.task.zone_id)
        for _ in range(max_ticks):
            obj = self.world.object_by_id(self.task.object_id)
            to_zone = np.array(zone.pos) - np.array(obj.pos)
            dist = np.linalg.norm(to_zone)
            if dist <= 0.45 * self.task.tolerance:
                return
            u = to_zone / dist
            aim = np.array(obj.pos) - u * (obj.radius - 0.02)
            self._command(aim, 0.0, fresh_ik=True)
        raise GenerationError(f"push did not converge (task {self.task.id})")


def scripted_expert(task: TaskSpec, scene: dict, seed: int):
    """Generate one successful expert episode for `task`.

    Returns (episode, final_world). Raises GenerationError when the object is
    unreachable or the rollout fails its success predicate.
    """
    arm = arm_from_scene(scene)
    rng = make_rng(seed, "expert", task.id)
    world = instantiate_scene(scene, rng)

    obj = world.object_by_id(task.object_id)
    zone = world.zone_by_id(task.zone_id)
    if np.linalg.norm(np.array(obj.pos) - np.array(arm.base)) > arm.span:
        raise GenerationError(f"object {task.object_id} outside arm span")

    start_jitter = scene.get("start_jitter", 0.0)
    q_home = canonical_start_joints(scene, task)
    q0 = q_home + rng.normal(0.0, start_jitter, size=arm.dof) if start_jitter > 0 else q_home
    lo = np.array([l for l, _ in arm.joint_limits])
    hi = np.array([h for _, h in arm.joint_limits])
    q0 = np.clip(q0, lo, hi)
    world = replace(world, joints=JointVector(tuple(q0), 1.0))

    run = _ExpertRun(task, scene, world)
    if task.kind == "pick_place":
        run.move_to(obj.pos, 1.0, tol=0.012)
        run.hold(3, 1.0)          # settle before closing so the grasp is robust
        run.hold(2, 0.0)          # close: grasp on the open->closed transition
        run.move_to(zone.pos, 0.0, tol=0.02)
        run.hold(2, 0.0)
        run.hold(2, 1.0)          # release over the zone
        away = np.array(zone.pos) + _retract_dir(zone.pos, arm) * 0.22
        run.move_to(away, 1.0, tol=0.03)
        run.hold(4, 1.0)
    else:  # push
        u = np.array(zone.pos) - np.array(obj.pos)
        u = u / np.linalg.norm(u)
        behind = np.array(obj.pos) - u * (obj.radius + 0.05)
        run.move_to(behind, 1.0, tol=0.012)
        run.hold(2, 1.0)
        run.hold(2, 0.0)          # close away from the object: a pushing fist, no grasp
        run.servo_push()
        run.hold(2, 0.0)
        run.hold(2, 1.0)          # open before withdrawing
        obj_now = run.world.object_by_id(task.object_id)
        back = np.array(obj_now.pos) - u * (obj_now.radius + 0.26)
        run.move_to(back, 1.0, tol=0.04)
        run.hold(4, 1.0)

    if len(run.steps) < 2:
        raise GenerationError("degenerate episode")
    if not success(task, run.world):
        raise GenerationError(
            f"expert rollout failed success predicate for task {task.id} (seed {seed})"
        )
    return Episode(task_id=task.id, seed=seed, steps=run.steps), run.world


def _retract_dir(point, arm: ArmConfig) -> np.ndarray:
    v = np.array(arm.base) - np.array(point)
    n = np.linalg.norm(v)
    return v / n if n > 1e-9 else np.array([1.0, 0.0])


def generate_dataset(out_dir, scene: dict, per_task: int, seed: int, retries: int = 10):
    """Generate per_task expert episodes for every scene task and write the
    dataset (manifest + episode files) to out_dir."""
    if per_task < 1:
        raise ValidationError(f"per_task must be >= 1, got {per_task}")
    tasks = tasks_from_scene(scene)
    arm = arm_from_scene(scene)
    episodes = []
    for task in tasks:
        for k in range(per_task):
            last_err = None
            for attempt in range(retries + 1):
                ep_seed = (seed, "episode", task.id, k, attempt)
                try:
                    ep, _ = scripted_expert(task, scene, seed=_fold_seed(*ep_seed))
                    episodes.append(ep)
                    break
                except GenerationError as e:
                    last_err = e
            else:
                raise GenerationError(
                    f"task {task.id} episode {k}: exhausted {retries} retries: {last_err}"
                )
    obs = np.array([s.obs.features for ep in episodes for s in ep.steps])
    acts = np.array([s.action.vec() for ep in episodes for s in ep.steps])
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        control_hz=scene.get("control_hz", CONTROL_HZ),
        tasks=scene["tasks"],
        obs_dim=obs.shape[1],
        dof=arm.dof,
        gripper_index=arm.dof,
        norm_stats=NormStats.from_arrays(obs, acts),
        episodes=[],
        scene=scene,
        provenance={"seed": seed, "per_task": per_task},
    )
    from .core import save_dataset

    save_dataset(out_dir, manifest, episodes)
    return manifest, episodes


def _fold_seed(seed, *parts) -> int:
    from .core import derive_seed

    return derive_seed(seed, *parts)
