"""Batched key-press environment: hands over a shared keyboard.

Each hand is an independent plant driven by its own frozen latent
decoder; the keyboard state is shared, so both hands press the same
keys. High-level policies act once per 60 Hz frame by emitting a latent
code that the decoder unrolls into 8 muscle-activation ticks.

Episodes start at a score note onset drawn by the note-level adaptive
sampler, run a fixed number of frames and end early at the score's end;
the per-episode performance signal is the discounted min-over-hands
frame recall. Hands always start from the same fixed pose above the
keys.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .. import distill as distill_mod
from .. import sampler as sampler_mod
from ..plant import (ContactResult, KeyboardConfig, Plant, TICK_DT,
                     TICKS_PER_FRAME, key_step)
from ..rewards import frame_scores, key_reward
from ..score import KeyPattern, encode_goal, key_targets_at

FRAME_DT = 1.0 / 60.0


@dataclass
class HandRig:
    plant: Plant                 # built without a keyboard
    decoder: distill_mod.LatentVAE
    side: str                    # 'left' or 'right'


class FrameResult(NamedTuple):
    key_reward: np.ndarray        # (B, H)
    recall: np.ndarray            # (B, H)
    precision: np.ndarray         # (B, H)
    done: np.ndarray              # (B,)
    pressed: list[set[int]]       # per env, after the frame
    disc_pairs: list[dict]        # per hand: {'wrist': (prev, new), 'finger': ...}


class PianoEnvBatch:
    def __init__(self, rigs: list[HandRig], keyboard: KeyboardConfig,
                 patterns: list[KeyPattern], onset_frames: list[int],
                 env_count: int, rng: np.random.Generator,
                 chunk_frames: int = 150, zeta: float = 0.95, eta: float = 8.0,
                 alpha: float = 0.5, goal_patterns: int = 5,
                 timer_norm: float = 2.0, tail_frames: int = 30,
                 scripted_start: int | None = None):
        sides = [r.side for r in rigs]
        if len(set(sides)) != len(sides):
            raise ValueError("each hand needs a distinct side")
        self.rigs = rigs
        self.kb = keyboard
        self.patterns = patterns
        self.batch = env_count
        self.rng = rng
        self.chunk_frames = chunk_frames
        self.zeta = zeta
        self.goal_patterns = goal_patterns
        self.timer_norm = timer_norm
        self.scripted_start = scripted_start

        end_time = max((p.end for p in patterns), default=0.0)
        self.score_end = int(np.ceil(end_time * 60.0)) + tail_frames
        if onset_frames:
            chunks = sampler_mod.note_chunks(onset_frames, self.score_end,
                                             chunk_frames)
        else:
            chunks = [sampler_mod.Chunk(0, 0, min(chunk_frames, self.score_end),
                                        0, 1)]
        self.sampler = sampler_mod.make_state(chunks, chunk_frames, zeta, eta,
                                              alpha)

        # per-frame caches: targets at frame boundaries and goal encodings
        self._targets = [key_targets_at(patterns, f / 60.0)
                         for f in range(self.score_end + 2)]
        self._goals = np.stack([
            encode_goal(patterns, f / 60.0, goal_patterns, keyboard.n_keys,
                        timer_norm).reshape(-1)
            for f in range(self.score_end + 2)])

        B = env_count
        self.states = [r.plant.rest_state(B) for r in rigs]
        self.key_d = np.zeros((B, keyboard.n_keys))
        self.key_v = np.zeros((B, keyboard.n_keys))
        self.pressed_prev = np.zeros((B, keyboard.n_keys), dtype=bool)
        self.score_frame = np.zeros(B, dtype=int)
        self.episode_frames = np.zeros(B, dtype=int)
        self.chunk_idx = np.zeros(B, dtype=int)
        self._recalls: list[dict[str, list[float]]] = [dict() for _ in range(B)]
        self._obs_offset = np.array([float(keyboard.key_centers().mean()), 0.0,
                                     float(keyboard.hi[:, 2].max())])
        self._prev_obs_feat: np.ndarray | None = None
        self._prev_disc: list[dict[str, np.ndarray]] = [{} for _ in rigs]
        self.episodes_finished = 0
        self.global_tick = 0
        for i in range(B):
            self.reset_env(i)
        self._refresh_feature_history(np.ones(B, dtype=bool))

    # -- features -------------------------------------------------------------

    def _hand_obs_features(self, h: int) -> np.ndarray:
        """Global link kinematics of one hand, keyboard-centered."""
        rig = self.rigs[h]
        st = self.states[h]
        poses = rig.plant.forward_kinematics(st.q, st.qdot)
        B = self.batch
        return np.concatenate([
            (poses.positions - self._obs_offset).reshape(B, -1),
            poses.angles,
            (poses.lin_vel / 4.0).reshape(B, -1),
            poses.ang_vel / 20.0,
        ], axis=1)

    def _hand_disc_features(self, h: int) -> dict[str, np.ndarray]:
        """Hand-local discriminator features: wrist motion, finger pose."""
        rig = self.rigs[h]
        st = self.states[h]
        poses = rig.plant.forward_kinematics(st.q, st.qdot)
        return hand_disc_features(rig.plant, poses)

    def obs_feature_dim(self) -> int:
        return sum(r.plant.n_links * 8 for r in self.rigs)

    @property
    def obs_dim(self) -> int:
        return 2 * self.obs_feature_dim() + self._goals.shape[1]

    def _refresh_feature_history(self, mask: np.ndarray) -> None:
        cur = np.concatenate([self._hand_obs_features(h)
                              for h in range(len(self.rigs))], axis=1)
        if self._prev_obs_feat is None:
            self._prev_obs_feat = cur.copy()
        else:
            self._prev_obs_feat[mask] = cur[mask]
        for h in range(len(self.rigs)):
            feats = self._hand_disc_features(h)
            if not self._prev_disc[h]:
                self._prev_disc[h] = {k: v.copy() for k, v in feats.items()}
            else:
                for k, v in feats.items():
                    self._prev_disc[h][k][mask] = v[mask]

    def observe(self) -> np.ndarray:
        """Shared bimanual observation plus the goal, one row per env."""
        cur = np.concatenate([self._hand_obs_features(h)
                              for h in range(len(self.rigs))], axis=1)
        goal = self._goals[np.minimum(self.score_frame, self.score_end + 1)]
        return np.concatenate([cur, self._prev_obs_feat, goal], axis=1)

    # -- episode control --------------------------------------------------------

    def reset_env(self, i: int) -> None:
        if self.scripted_start is not None:
            self.chunk_idx[i] = 0
            self.score_frame[i] = self.scripted_start
        else:
            idx, frame = self.sampler.sample(self.rng)
            self.chunk_idx[i] = idx
            self.score_frame[i] = frame
        self.episode_frames[i] = 0
        for h, rig in enumerate(self.rigs):
            rest = rig.plant.rest_state(1)
            for name in ("q", "qdot", "act"):
                getattr(self.states[h], name)[i] = getattr(rest, name)[0]
        self.key_d[i] = 0.0
        self.key_v[i] = 0.0
        self.pressed_prev[i] = False
        self._recalls[i] = {r.side: [] for r in self.rigs}

    def _episode_end(self, i: int) -> None:
        if self.scripted_start is None:
            left = self._recalls[i].get("left") or [1.0] * self.episode_frames[i]
            right = self._recalls[i].get("right") or [1.0] * self.episode_frames[i]
            perf = sampler_mod.recall_performance(left, right,
                                                  self.chunk_frames, self.zeta)
            self.sampler.update(self.chunk_idx[i], perf)
        self.episodes_finished += 1
        self.reset_env(i)

    # -- dynamics ---------------------------------------------------------------

    def frame_step(self, latents: list[np.ndarray]) -> FrameResult:
        """Run one 60 Hz frame driven by one latent per hand."""
        H = len(self.rigs)
        B = self.batch
        z = [torch.as_tensor(latents[h], dtype=torch.float32) for h in range(H)]
        for _ in range(TICKS_PER_FRAME):
            contacts = []
            poses_list = []
            for h, rig in enumerate(self.rigs):
                st = self.states[h]
                poses = rig.plant.forward_kinematics(st.q, st.qdot)
                contacts.append(rig.plant.contact_forces(
                    poses, self.key_d, self.key_v, keyboard=self.kb))
                poses_list.append(poses)
            static = sum(c.key_force_static for c in contacts)
            active = sum(c.active_count for c in contacts)
            total = sum(c.key_force for c in contacts)
            for h, rig in enumerate(self.rigs):
                st = self.states[h]
                s = rig.plant.proprioception(st, poses_list[h])
                action = distill_mod.decode(rig.decoder, s, z[h])
                self.states[h] = rig.plant.step(
                    st, action, external_tip_force=contacts[h].tip_force,
                    poses=poses_list[h])
            combined = ContactResult(total, None, static, active)
            self.key_d, self.key_v = key_step(self.kb, self.key_d, self.key_v,
                                              combined, TICK_DT)
            self.global_tick += 1

        self.score_frame += 1
        self.episode_frames += 1
        frame_idx = np.minimum(self.score_frame, self.score_end + 1)
        pressed_mask = self.key_d / self.kb.max_dip > self.kb.tau_press

        key_r = np.zeros((B, H))
        recall = np.zeros((B, H))
        precision = np.zeros((B, H))
        pressed_sets = []
        tips = [self.rigs[h].plant.fingertips(
            self.rigs[h].plant.forward_kinematics(self.states[h].q,
                                                  self.states[h].qdot))[0]
                for h in range(H)]
        for i in range(B):
            left, right = self._targets[frame_idx[i]]
            union = left | right
            pressed = set(np.flatnonzero(pressed_mask[i]).tolist())
            pressed_sets.append(pressed)
            for h, rig in enumerate(self.rigs):
                targets_h = left if rig.side == "left" else right
                out = key_reward(targets_h, union, tips[h][i], self.key_d[i],
                                 self.pressed_prev[i], self.kb)
                key_r[i, h] = out.reward
                _, rec, _ = frame_scores(pressed, targets_h)
                prec = (len(pressed & targets_h) / len(pressed)
                        if pressed else 1.0)
                recall[i, h] = rec
                precision[i, h] = prec
                self._recalls[i][rig.side].append(rec)
        self.pressed_prev = pressed_mask.copy()

        disc_pairs = []
        for h in range(H):
            feats = self._hand_disc_features(h)
            disc_pairs.append({k: (self._prev_disc[h][k].copy(), v.copy())
                               for k, v in feats.items()})
            for k, v in feats.items():
                self._prev_disc[h][k] = v.copy()

        done = (self.episode_frames >= self.chunk_frames) | \
               (self.score_frame >= self.score_end)
        cur_feat = np.concatenate([self._hand_obs_features(h)
                                   for h in range(H)], axis=1)
        self._prev_obs_feat = cur_feat
        for i in range(B):
            if done[i]:
                self._episode_end(i)
        if done.any():
            self._refresh_feature_history(done)
        return FrameResult(key_r, recall, precision, done, pressed_sets,
                           disc_pairs)


def hand_disc_features(plant: Plant, poses) -> dict[str, np.ndarray]:
    """Wrist-motion and finger-pose features in the hand's own frame."""
    B = poses.positions.shape[0]
    anchor = np.asarray(plant.config.root.anchor)
    palm = poses.positions[:, 0]
    palm_v = poses.lin_vel[:, 0]
    wrist = np.concatenate([palm - anchor, palm_v / 4.0], axis=1)
    rel = poses.positions[:, 1:] - palm[:, None, :]
    finger = np.concatenate([rel.reshape(B, -1), poses.angles[:, 1:]], axis=1)
    return {"wrist": wrist, "finger": finger}


def reference_disc_features(plant: Plant,
                            references: list[np.ndarray]) -> dict[str, np.ndarray]:
    """Transition dataset (feat_t, feat_t+1 concatenated) from references."""
    wrist_rows, finger_rows = [], []
    for ref in references:
        if len(ref) < 2:
            continue
        qdot = np.vstack([(ref[1:] - ref[:-1]) * 60.0, np.zeros((1, ref.shape[1]))])
        poses = plant.forward_kinematics(ref, qdot)
        feats = hand_disc_features(plant, poses)
        wrist_rows.append(np.concatenate([feats["wrist"][:-1],
                                          feats["wrist"][1:]], axis=1))
        finger_rows.append(np.concatenate([feats["finger"][:-1],
                                           feats["finger"][1:]], axis=1))
    return {"wrist": np.concatenate(wrist_rows, axis=0),
            "finger": np.concatenate(finger_rows, axis=0)}
