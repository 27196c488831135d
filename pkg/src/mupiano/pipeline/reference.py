"""Synthetic reference motions for the desk-scale hand.

Three families of scripted 60 Hz joint-space trajectories: sinusoidal
joint sweeps, single-key reach/press/release motions, and multi-finger
chords. They serve as tracking targets during policy training and as
the realism reference for the imitation discriminators.

Trajectories are (T, D) arrays of dof values (root displacements then
joint angles) saved as CSV, one row per frame.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..plant import KeyboardConfig, Plant
from ..rewards import key_point

FRAME_RATE = 60.0


class ReferenceError(RuntimeError):
    """Unreachable pose or unsupported morphology for pose synthesis."""


# ---------------------------------------------------------------------------
# inverse kinematics (two-joint fingers)

def fingertip_ik(plant: Plant, finger: int, target: np.ndarray,
                 root_override: dict[str, float] | None = None) -> np.ndarray:
    """Dof vector placing one fingertip at a world-space target.

    Solves the root slide so the finger column lines up with the target
    x, then the two-link chain in the y-z plane (flexed-down branch).
    Only two-joint fingers are supported. Raises ReferenceError when the
    target is out of reach or violates joint limits.
    """
    tip_link = plant.fingertip_links[finger]
    chain = plant._ancestors[finger]
    if len(chain) != 2:
        raise ReferenceError("pose synthesis supports two-joint fingers only")
    j0 = chain[0]
    cfg = plant.config
    q = np.zeros(plant.n_dofs)
    q[:plant.n_root] = cfg.root.rest
    if root_override:
        for name, val in root_override.items():
            q[cfg.root.dofs.index(name)] = val

    anchor = np.asarray(cfg.root.anchor)
    off = plant._offsets[j0]
    dofs = list(cfg.root.dofs)
    if "x" in dofs:
        xi = dofs.index("x")
        root_x = float(target[0] - anchor[0] - off[0])
        lo, hi = cfg.root.lo[xi], cfg.root.hi[xi]
        if not lo - 1e-9 <= root_x <= hi + 1e-9:
            raise ReferenceError("target x outside the root slide range")
        q[xi] = min(max(root_x, lo), hi)
    elif abs(target[0] - (anchor[0] + off[0])) > 1e-9:
        raise ReferenceError("target x unreachable without a root x dof")

    base = anchor.copy()
    base[0] += off[0]
    base[1] += off[1]
    base[2] += off[2]
    if "x" in dofs:
        base[0] += q[dofs.index("x")]
    if "z" in dofs:
        base[2] += q[dofs.index("z")]

    link_of_joint = {l.parent_joint: l for l in cfg.links}
    l1 = link_of_joint[chain[0]].length
    l2 = link_of_joint[chain[1]].length
    u = float(target[1] - base[1])
    v = float(-(target[2] - base[2]))   # flexion positive = tip moving down
    r2 = u * u + v * v
    c2 = (r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    if not -1.0 <= c2 <= 1.0:
        raise ReferenceError("target out of reach for the finger chain")
    q2 = float(np.arccos(c2))
    q1 = float(np.arctan2(v, u) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2)))
    for ji, val in zip(chain, (q1, q2)):
        spec = cfg.joints[ji]
        if not spec.lo - 1e-9 <= val <= spec.hi + 1e-9:
            raise ReferenceError(f"joint {spec.name} limit violated by pose")
        q[plant.n_root + ji] = min(max(val, spec.lo), spec.hi)
    return q


# ---------------------------------------------------------------------------
# trajectory families

def _ease(a: np.ndarray, b: np.ndarray, frames: int) -> np.ndarray:
    s = (1.0 - np.cos(np.pi * np.linspace(0.0, 1.0, frames))) / 2.0
    return a[None, :] + s[:, None] * (b - a)[None, :]


def _from_waypoints(points: list[tuple[np.ndarray, float]]) -> np.ndarray:
    """Cosine-eased trajectory through (pose, seconds-to-reach) waypoints."""
    segs = []
    current = points[0][0]
    for pose, dur in points[1:]:
        frames = max(2, int(round(dur * FRAME_RATE)))
        segs.append(_ease(current, pose, frames)[:-1])
        current = pose
    segs.append(current[None, :])
    return np.concatenate(segs, axis=0)


def sinusoid_sweep(plant: Plant, seconds: float, rng: np.random.Generator,
                   freq_hz: float | None = None) -> np.ndarray:
    """Per-dof sinusoids within conservative fractions of the ranges."""
    T = int(round(seconds * FRAME_RATE))
    t = np.arange(T) / FRAME_RATE
    q = np.zeros((T, plant.n_dofs))
    cfg = plant.config
    lo = np.concatenate([cfg.root.lo, [j.lo for j in cfg.joints]])
    hi = np.concatenate([cfg.root.hi, [j.hi for j in cfg.joints]])
    for d in range(plant.n_dofs):
        f = freq_hz if freq_hz is not None else float(rng.uniform(0.4, 1.2))
        mid = 0.5 * (lo[d] + hi[d])
        amp = float(rng.uniform(0.2, 0.45)) * (hi[d] - lo[d]) / 2.0
        phase = float(rng.uniform(0, 2 * np.pi))
        center = mid + float(rng.uniform(-0.2, 0.2)) * (hi[d] - lo[d]) / 2.0
        q[:, d] = center + amp * np.sin(2 * np.pi * f * t + phase)
    # start from the first pose at rest velocity: prepend a short ease-in
    lead = _ease(plant.rest_state().q[0], q[0], int(0.4 * FRAME_RATE))
    return np.concatenate([lead[:-1], q], axis=0)


def key_reach(plant: Plant, keyboard: KeyboardConfig, key: int, finger: int,
              press_depth: float = 0.008, hover: float = 0.012,
              hold: float = 0.4) -> np.ndarray:
    """Rest -> hover over the key -> press -> hold -> release -> rest."""
    pk = key_point(keyboard, key)
    up = fingertip_ik(plant, finger, pk + np.array([0, 0, hover]))
    down = fingertip_ik(plant, finger, pk + np.array([0, 0, -press_depth]),
                        root_override={
                            d: up[i] for i, d in enumerate(plant.config.root.dofs)
                            if d == "x"})
    rest = plant.rest_state().q[0]
    return _from_waypoints([(rest, 0.0), (up, 0.5), (down, 0.15), (down, hold),
                            (up, 0.15), (rest, 0.5)])


def chord(plant: Plant, keyboard: KeyboardConfig, keys: list[int],
          fingers: list[int], press_depth: float = 0.008,
          hover: float = 0.012, hold: float = 0.5) -> np.ndarray:
    """Simultaneous multi-finger press of several keys."""
    if len(keys) != len(fingers):
        raise ReferenceError("one finger per chord key required")
    qs_up, qs_down = [], []
    # root x solved from the first pair; remaining fingers must line up
    pk0 = key_point(keyboard, keys[0])
    base = fingertip_ik(plant, fingers[0], pk0 + np.array([0, 0, hover]))
    root_x = {d: base[i] for i, d in enumerate(plant.config.root.dofs) if d == "x"}
    up = base.copy()
    down = fingertip_ik(plant, fingers[0], pk0 + np.array([0, 0, -press_depth]),
                        root_override=root_x)
    for key, fi in zip(keys[1:], fingers[1:]):
        pk = key_point(keyboard, key)
        u = fingertip_ik(plant, fi, pk + np.array([0, 0, hover]),
                         root_override=root_x)
        d = fingertip_ik(plant, fi, pk + np.array([0, 0, -press_depth]),
                         root_override=root_x)
        jslice = slice(plant.n_root, None)
        chain = plant._ancestors[fi]
        for ji in chain:
            up[plant.n_root + ji] = u[plant.n_root + ji]
            down[plant.n_root + ji] = d[plant.n_root + ji]
    rest = plant.rest_state().q[0]
    return _from_waypoints([(rest, 0.0), (up, 0.5), (down, 0.15), (down, hold),
                            (up, 0.15), (rest, 0.5)])


def nearest_finger(plant: Plant, keyboard: KeyboardConfig, key: int) -> int:
    """Finger whose column needs the smallest root displacement for the key."""
    pk = key_point(keyboard, key)
    anchor_x = plant.config.root.anchor[0]
    offs = [plant._offsets[plant._ancestors[f][0]][0]
            for f in range(len(plant.fingertip_links))]
    shifts = [abs(pk[0] - anchor_x - o) for o in offs]
    return int(np.argmin(shifts))


def generate_references(plant: Plant, keyboard: KeyboardConfig | None,
                        kinds: tuple[str, ...], count: int, seconds: float,
                        seed: int) -> list[np.ndarray]:
    """Deterministic reference set; kinds cycle over the requested count.

    The special single kind 'coverage' presses every key once and adds
    chords and sweeps (count then bounds the extra sweeps).
    """
    if tuple(kinds) == ("coverage",):
        if keyboard is None:
            raise ReferenceError("coverage references need a keyboard")
        return key_coverage_references(plant, keyboard, extra_sweeps=count,
                                       seed=seed)
    rng = np.random.default_rng(seed)
    out = []
    n_fingers = len(plant.fingertip_links)
    for i in range(count):
        kind = kinds[i % len(kinds)]
        if kind == "sweep":
            out.append(sinusoid_sweep(plant, seconds, rng))
        elif kind == "sweep1hz":
            out.append(sinusoid_sweep(plant, seconds, rng, freq_hz=1.0))
        elif kind == "reach":
            if keyboard is None:
                raise ReferenceError("key reach references need a keyboard")
            key = int(rng.integers(keyboard.n_keys))
            out.append(key_reach(plant, keyboard, key,
                                 nearest_finger(plant, keyboard, key)))
        elif kind == "chord":
            if keyboard is None or n_fingers < 2:
                raise ReferenceError("chords need a keyboard and >= 2 fingers")
            size = int(rng.integers(2, n_fingers + 1))
            f0 = int(rng.integers(0, n_fingers - size + 1))
            fingers = list(range(f0, f0 + size))
            base_key = int(rng.integers(0, keyboard.n_keys - size + 1))
            keys = [base_key + k for k in range(size)]
            out.append(chord(plant, keyboard, keys, fingers))
        else:
            raise ReferenceError(f"unknown reference kind {kind!r}")
    return out


def key_coverage_references(plant: Plant, keyboard: KeyboardConfig,
                            extra_sweeps: int, seed: int,
                            chords_per_size: int = 2) -> list[np.ndarray]:
    """Press every key once, add chords and sweeps; stage-3 training diet."""
    rng = np.random.default_rng(seed)
    out = []
    n_fingers = len(plant.fingertip_links)
    for key in range(keyboard.n_keys):
        out.append(key_reach(plant, keyboard, key,
                             nearest_finger(plant, keyboard, key)))
    if n_fingers >= 2:
        for size in range(2, n_fingers + 1):
            for _ in range(chords_per_size):
                f0 = int(rng.integers(0, n_fingers - size + 1))
                fingers = list(range(f0, f0 + size))
                base_key = int(rng.integers(0, keyboard.n_keys - size + 1))
                out.append(chord(plant, keyboard,
                                 [base_key + k for k in range(size)], fingers))
    for _ in range(extra_sweeps):
        out.append(sinusoid_sweep(plant, 3.0, rng))
    return out


# ---------------------------------------------------------------------------
# persistence

def save_trajectory(path, traj: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("frame," + ",".join(f"q{d}" for d in range(traj.shape[1])) + "\n")
        for i, row in enumerate(traj):
            f.write(str(i) + "," + ",".join(repr(float(x)) for x in row) + "\n")


def load_trajectory(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    rows = [[float(x) for x in line.split(",")[1:]] for line in lines[1:]]
    return np.asarray(rows)


def save_reference_set(out_dir, trajectories: list[np.ndarray]) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, traj in enumerate(trajectories):
        p = out_dir / f"traj_{i:03d}.csv"
        save_trajectory(p, traj)
        paths.append(p)
    return paths
