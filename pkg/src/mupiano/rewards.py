"""Scalar rewards for tracking and key-press training.

The tracking reward blends weighted link position and orientation errors
with an activation-sparsity term computed on the raw (unclipped) policy
output. The key-press reward scores per-hand target keys through a
distance term toward a point on each key's top surface and a depression
term, penalizes presses of non-target keys, and applies an intermittent
press rule that zeroes the depression term on temporary releases.

Functions here are pure; geometry is any object exposing per-key
bounding boxes ``lo``/``hi`` with shape (K, 3), a maximal deflection
``max_dip`` and a press threshold ``tau_press`` (see plant.KeyboardConfig).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class TrackingWeights:
    """Per-link position (kappa) and orientation (omega) weights."""

    kappa: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        for name in ("kappa", "omega"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any(v < 0):
                raise ValueError(f"{name} weights must be nonnegative")
            if v.sum() <= 0:
                raise ValueError(f"{name} weights must not all be zero")
            object.__setattr__(self, name, v)

    def normalized(self) -> "TrackingWeights":
        return TrackingWeights(self.kappa / self.kappa.sum(),
                               self.omega / self.omega.sum())


class TrackingParts(NamedTuple):
    r_pos: np.ndarray
    r_orient: np.ndarray
    r_act: np.ndarray
    e_pos: np.ndarray
    e_orient: np.ndarray


def wrap_angle(x):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=float), 2.0 * np.pi)


def tracking_reward(positions, angles, target_positions, target_angles,
                    raw_action, weights: TrackingWeights):
    """Pose-tracking reward in (0, 1], with activation regularization.

    positions/angles carry link poses with shape (..., L, 3) / (..., L);
    raw_action is the unclipped policy output, shape (..., A). Returns
    the reward with the leading batch shape plus the term breakdown.
    """
    w = weights.normalized()
    dp = np.linalg.norm(np.asarray(target_positions) - np.asarray(positions), axis=-1)
    e_pos = np.sum(w.kappa * dp, axis=-1)
    da = wrap_angle(np.asarray(target_angles) - np.asarray(angles))
    e_orient = np.sum(w.omega * da ** 2, axis=-1)
    r_pos = 0.7 * np.exp(-50.0 * e_pos) + 0.3 * np.exp(-3.0 * e_pos)
    r_orient = np.exp(-3.0 * e_orient)
    a = np.asarray(raw_action, dtype=float)
    r_act = np.exp(-np.sum(a ** 4, axis=-1) / a.shape[-1])
    r = 0.9 * (0.5 * r_pos + 0.5 * r_orient) + 0.1 * r_act
    return r, TrackingParts(r_pos, r_orient, r_act, e_pos, e_orient)


# ---------------------------------------------------------------------------
# key geometry

def key_point(geometry, key: int) -> np.ndarray:
    """Reward target point of a key: lateral center, 90% along the top surface."""
    lo, hi = geometry.lo[key], geometry.hi[key]
    return np.array([0.5 * (lo[0] + hi[0]), lo[1] + 0.9 * (hi[1] - lo[1]), hi[2]])


def key_distance(geometry, key: int, fingertip) -> tuple[np.ndarray, bool]:
    """Adjusted displacement from a fingertip to a key's target point.

    The longitudinal (y) component is downscaled by 0.9 while the finger
    is above the key top plane, and the vertical component is dropped
    once the finger is over the key and already below its surface point.
    Also returns the over-the-key indicator (xy inside the key box,
    half-open at the upper bounds).
    """
    p = np.asarray(fingertip, dtype=float)
    pk = key_point(geometry, key)
    lo, hi = geometry.lo[key], geometry.hi[key]
    over = bool(lo[0] <= p[0] < hi[0] and lo[1] <= p[1] < hi[1])
    d = pk - p
    if p[2] >= hi[2]:
        d[1] *= 0.1
    if over and p[2] < pk[2]:
        d[2] = 0.0
    return d, over


class KeyRewardResult(NamedTuple):
    reward: float
    positive: float
    negative: float
    matches: dict[int, int]   # target key -> fingertip index


def _match_fingers(target_keys: list[int], dists: np.ndarray) -> dict[int, int]:
    """Greedy distance matching; each finger serves at most one key.

    Pairs are taken in order of increasing distance (ties resolved by
    finger index, then key order). Keys left over once every finger is
    occupied fall back to their nearest finger regardless of occupancy.
    """
    n_keys, n_fingers = dists.shape
    order = sorted(
        ((dists[k, f], f, k) for k in range(n_keys) for f in range(n_fingers)),
        key=lambda t: (t[0], t[1], t[2]),
    )
    matches: dict[int, int] = {}
    used: set[int] = set()
    for _, f, k in order:
        if target_keys[k] in matches or f in used:
            continue
        matches[target_keys[k]] = f
        used.add(f)
    for k in range(n_keys):
        if target_keys[k] not in matches:
            matches[target_keys[k]] = int(np.argmin(dists[k]))
    return matches


def key_reward(targets_h: set[int], targets_all: set[int], fingertips,
               key_depress, prev_pressed, geometry,
               finger_assignment: dict[int, int] | None = None) -> KeyRewardResult:
    """Per-hand key-press reward.

    targets_h are this hand's target keys, targets_all the union over
    hands (non-target penalties are holistic). fingertips has shape
    (F, 3), key_depress the per-key deflection, prev_pressed the per-key
    pressed flags of the previous 60 Hz frame. An explicit key-to-finger
    assignment replaces the nearest-finger matching when given.
    """
    tips = np.asarray(fingertips, dtype=float)
    depth = np.asarray(key_depress, dtype=float) / geometry.max_dip
    prev = np.asarray(prev_pressed, dtype=bool)
    tau = geometry.tau_press

    negative = 0.2 * float(sum(
        depth[k] ** 6 for k in range(depth.size) if k not in targets_all))

    if not targets_h:
        return KeyRewardResult(1.0 - negative, 1.0, negative, {})

    keys = sorted(targets_h)
    dvec = np.zeros((len(keys), tips.shape[0], 3))
    over = np.zeros((len(keys), tips.shape[0]), dtype=bool)
    for a, k in enumerate(keys):
        for f in range(tips.shape[0]):
            dvec[a, f], over[a, f] = key_distance(geometry, k, tips[f])
    dnorm = np.linalg.norm(dvec, axis=-1)

    if finger_assignment is not None:
        matches = {k: finger_assignment[k] for k in keys}
    else:
        matches = _match_fingers(keys, dnorm)

    positive = 0.0
    for a, k in enumerate(keys):
        f = matches[k]
        dist = dnorm[a, f]
        r_dist = 0.8 * np.exp(-500.0 * dist ** 2) + 0.2 * np.exp(-5.0 * dist)
        released = prev[k] and depth[k] <= tau
        r_press = 0.0 if released else depth[k] ** 3 * float(over[a, f])
        positive += 0.6 * r_dist + 0.4 * r_press
    positive /= len(keys)
    return KeyRewardResult(positive - negative, positive, negative, matches)


def frame_scores(pressed: set[int], target: set[int]) -> tuple[float, float, float]:
    """Set precision/recall/F1 for one 60 Hz frame.

    Empty predictions carry no false positives (precision 1); an empty
    target set gives recall 1; F1 is 0 when both precision and recall are.
    """
    tp = len(pressed & target)
    precision = tp / len(pressed) if pressed else 1.0
    recall = tp / len(target) if target else 1.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def micro_f1(frames: list[tuple[set[int], set[int]]]) -> tuple[float, float, float]:
    """Micro-averaged precision/recall/F1 over (pressed, target) frames."""
    tp = sum(len(p & t) for p, t in frames)
    fp = sum(len(p - t) for p, t in frames)
    fn = sum(len(t - p) for p, t in frames)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1
