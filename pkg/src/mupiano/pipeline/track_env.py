"""Batched motion-tracking environment (no keyboard).

Environments run in tick lockstep: all share the 8-ticks-per-frame
phase, target windows refresh at frame boundaries, and episodes start
and end on frame boundaries. Episode starts are drawn by the adaptive
sampler from trajectory chunks; an episode ends at its chunk's end or
fails early when the weighted link position error exceeds the cap.
Per-tick rewards come from the pose-tracking reward evaluated against
the reference interpolated to the tick's time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .. import sampler as sampler_mod
from ..plant import Plant, PlantState, TICKS_PER_FRAME
from ..rewards import tracking_reward


class TickResult(NamedTuple):
    reward: np.ndarray     # (B,)
    done: np.ndarray       # (B,) episode ended after this tick
    failed: np.ndarray     # (B,) done due to the error cap
    diverged: np.ndarray   # (B,) reset due to non-finite state
    e_pos: np.ndarray      # (B,) weighted position error after the tick


@dataclass
class TrackSamplerParams:
    chunk_frames: int = 120
    zeta: float = 0.99
    eta: float = 5.0
    alpha: float = 0.5
    target_epochs: float = 20.0
    rollout_len: int = 32


class TrackingEnvBatch:
    """Vectorized tracking environments over a set of reference motions."""

    def __init__(self, plant: Plant, references: list[np.ndarray],
                 env_count: int, rng: np.random.Generator,
                 horizon: int = 4, error_cap: float = 0.05,
                 sampler_params: TrackSamplerParams = TrackSamplerParams()):
        if not references:
            raise ValueError("tracking needs at least one reference trajectory")
        for r in references:
            if r.ndim != 2 or r.shape[1] != plant.n_dofs:
                raise ValueError("reference dof count does not match the plant")
        self.plant = plant
        self.references = [np.asarray(r, dtype=float) for r in references]
        self.batch = env_count
        self.rng = rng
        self.horizon = horizon
        self.error_cap = error_cap
        self.weights = plant.config.tracking_weights()
        self.sp = sampler_params

        total = sum(len(r) for r in self.references)
        chunks: list[sampler_mod.Chunk] = []
        for ti, ref in enumerate(self.references):
            share = len(ref) / total
            chunks.extend(sampler_mod.partition(
                len(ref), sampler_params.chunk_frames, env_count,
                sampler_params.rollout_len,
                target_epochs=sampler_params.target_epochs * share, traj_id=ti))
        self.sampler = sampler_mod.make_state(
            chunks, sampler_params.chunk_frames, sampler_params.zeta,
            sampler_params.eta, sampler_params.alpha)

        # flat reference buffers: per-env rows become cheap gathers
        self._traj_offset = np.zeros(len(self.references), dtype=int)
        off = 0
        for ti, ref in enumerate(self.references):
            self._traj_offset[ti] = off
            off += len(ref)
        self._flat_ref = np.concatenate(self.references, axis=0)
        self._traj_len = np.array([len(r) for r in self.references])
        # interpolated target poses for every frame and in-frame tick
        pos_rows, ang_rows = [], []
        for ref in self.references:
            T = len(ref)
            nxt = np.minimum(np.arange(T) + 1, T - 1)
            for k in range(1, TICKS_PER_FRAME + 1):
                a = k / TICKS_PER_FRAME
                q = (1.0 - a) * ref + a * ref[nxt]
                poses = plant.forward_kinematics(q)
                pos_rows.append(poses.positions)
                ang_rows.append(poses.angles)
        L = plant.n_links
        self._target_pos = np.zeros((off, TICKS_PER_FRAME, L, 3))
        self._target_ang = np.zeros((off, TICKS_PER_FRAME, L))
        row = 0
        for ti, ref in enumerate(self.references):
            T = len(ref)
            base = self._traj_offset[ti]
            for k in range(TICKS_PER_FRAME):
                self._target_pos[base:base + T, k] = pos_rows[row]
                self._target_ang[base:base + T, k] = ang_rows[row]
                row += 1

        B = env_count
        self.state = plant.rest_state(B)
        self.chunk_idx = np.zeros(B, dtype=int)
        self.traj_id = np.zeros(B, dtype=int)
        self.frame = np.zeros(B, dtype=int)       # current frame in trajectory
        self.start_frame = np.zeros(B, dtype=int)
        self.tick_in_frame = 0                     # shared phase
        self.global_tick = 0
        self._frame_reward_acc = np.zeros(B)
        self._frame_rewards: list[list[float]] = [[] for _ in range(B)]
        self._failed = np.zeros(B, dtype=bool)
        self._poses = None
        self.episodes_finished = 0
        self.divergences = 0
        for i in range(B):
            self.reset_env(i)

    # -- protocol used by the distillation rollout --------------------------

    def set_error_cap(self, cap: float) -> None:
        self.error_cap = cap

    def tick(self) -> int:
        return self.global_tick

    def step_tick(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.step(actions)
        return out.done, out.diverged

    # -- environment core -----------------------------------------------------

    def reset_env(self, i: int) -> None:
        idx, frame = self.sampler.sample(self.rng)
        ti = self.sampler.chunks[idx].traj_id
        ref = self.references[ti]
        self.chunk_idx[i] = idx
        self.traj_id[i] = ti
        self.frame[i] = frame
        self.start_frame[i] = frame
        nxt = min(frame + 1, len(ref) - 1)
        self.state.q[i] = ref[frame]
        self.state.qdot[i] = (ref[nxt] - ref[frame]) * 60.0
        self.state.act[i] = 0.0
        self.state.t[i] = 0
        self._frame_reward_acc[i] = 0.0
        self._frame_rewards[i] = []
        self._failed[i] = False

    def proprio(self) -> np.ndarray:
        if self._poses is not None:
            return self.plant.proprioception(self.state, self._poses)
        return self.plant.proprioception(self.state)

    def target_window(self) -> np.ndarray:
        """Flattened next-H reference frames (clamped at trajectory end)."""
        base = self._traj_offset[self.traj_id]
        limit = self._traj_offset[self.traj_id] + self._traj_len[self.traj_id] - 1
        cols = []
        for h in range(self.horizon):
            rows = np.minimum(base + self.frame + 1 + h, limit)
            cols.append(self._flat_ref[rows])
        return np.concatenate(cols, axis=1)

    def _safe_plant_step(self, actions: np.ndarray) -> np.ndarray:
        """Vectorized step with per-env recovery on divergence."""
        from ..plant import SimulationDiverged
        diverged = np.zeros(self.batch, dtype=bool)
        try:
            self.state = self.plant.step(self.state, actions)
            return diverged
        except SimulationDiverged:
            pass
        for i in range(self.batch):
            sub = PlantState(*(a[i:i + 1].copy() for a in
                               (self.state.q, self.state.qdot, self.state.act,
                                self.state.key_d, self.state.key_v,
                                self.state.pressed_prev, self.state.t)))
            try:
                new = self.plant.step(sub, actions[i:i + 1])
                for name in ("q", "qdot", "act", "key_d", "key_v", "t"):
                    getattr(self.state, name)[i] = getattr(new, name)[0]
            except SimulationDiverged:
                diverged[i] = True
                self.divergences += 1
        return diverged

    def step(self, raw_actions: np.ndarray) -> TickResult:
        """Advance one tick with raw policy actions (plant clips internally)."""
        diverged = self._safe_plant_step(np.asarray(raw_actions, dtype=float))
        rows = np.minimum(self._traj_offset[self.traj_id] + self.frame,
                          self._traj_offset[self.traj_id]
                          + self._traj_len[self.traj_id] - 1)
        tpos = self._target_pos[rows, self.tick_in_frame]
        tang = self._target_ang[rows, self.tick_in_frame]
        poses = self.plant.forward_kinematics(self.state.q, self.state.qdot)
        self._poses = poses
        r, parts = tracking_reward(poses.positions, poses.angles,
                                   tpos, tang, raw_actions, self.weights)
        self._frame_reward_acc += r
        self.tick_in_frame += 1
        self.global_tick += 1

        done = np.zeros(self.batch, dtype=bool)
        failed = np.zeros(self.batch, dtype=bool)
        if self.tick_in_frame == TICKS_PER_FRAME:
            self.tick_in_frame = 0
            for i in range(self.batch):
                self._frame_rewards[i].append(
                    self._frame_reward_acc[i] / TICKS_PER_FRAME)
                self._frame_reward_acc[i] = 0.0
                self.frame[i] += 1
                chunk = self.sampler.chunks[self.chunk_idx[i]]
                fail = bool(parts.e_pos[i] > self.error_cap) or diverged[i]
                if fail or self.frame[i] >= chunk.end:
                    done[i] = True
                    failed[i] = fail
                    perf = sampler_mod.episode_performance(
                        self._frame_rewards[i], self.sp.chunk_frames,
                        self.sp.zeta, failed=fail)
                    self.sampler.update(self.chunk_idx[i], perf)
                    self.episodes_finished += 1
                    self.reset_env(i)
            if done.any():
                self._poses = None   # cached poses are stale after resets
        return TickResult(r, done, failed, diverged, parts.e_pos)
