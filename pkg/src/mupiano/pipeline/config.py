"""Run configuration: YAML schema, planar hand builder, stage settings.

A run config file is a YAML mapping with sections:

  plant:     hand morphology (see planar_hand / explicit joint lists)
  keyboard:  key geometry and dynamics (uniform generator arguments)
  score:     path to a .txt or .mid score, or inline text
  track:     stage-1 settings (TrackSettings fields)
  distill:   stage-2 settings (DistillSettings fields)
  high:      stage-3 settings (HighSettings fields, incl. per-hand anchors)

Units: lengths m, times s, forces N, angles rad. Every stage section is
optional; omitted fields take the dataclass defaults below, which are
the published hyperparameters where one exists and desk-scale values
otherwise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .. import plant as plant_mod
from ..muscle import MuscleParams
from ..plant import JointSpec, KeyboardConfig, LinkSpec, MuscleSpec, PlantConfig, RootSpec


class ConfigError(ValueError):
    """Missing file, unknown key, or inconsistent configuration."""


# ---------------------------------------------------------------------------
# planar hand builder

@dataclass(frozen=True)
class Morphology:
    """Compact description of the default planar hand."""

    fingers: int = 3
    joints_per_finger: int = 2
    finger_spacing: float = 0.0236
    link_lengths: tuple[float, ...] = (0.05, 0.045)
    moment_arm: float = 0.008
    long_muscles: bool = True
    long_moment_arm: float = 0.004
    joint_inertia: float = 4e-5
    joint_damping: float = 0.05
    joint_armature: float = 1e-4
    joint_lo: float = -0.35
    joint_hi: float = 1.7
    palm_kappa: float = 0.1
    palm_omega: float = 0.2
    tip_kappa: float = 0.3
    link_omega: float = 0.1
    # longer optimal fiber and a soft passive curve keep force authority
    # across the whole joint range of the desk-scale hand
    muscle: MuscleParams = MuscleParams(l_opt=0.04, fp_gain=0.5)


def planar_hand(morph: Morphology, root: RootSpec = RootSpec(),
                hand_side: str = "right") -> PlantConfig:
    """Build the default morphology: F serial fingers on a sliding root.

    Each joint gets a flexor/antagonist pair with single-joint moment
    arms; optionally one long flexor/extensor pair spans every finger
    joint, which makes the hand over-actuated with coupled actuation.
    """
    if len(morph.link_lengths) != morph.joints_per_finger:
        raise ConfigError("link_lengths must match joints_per_finger")
    joints: list[JointSpec] = []
    links: list[LinkSpec] = [LinkSpec("palm", -1, 0.0, morph.palm_kappa,
                                      morph.palm_omega)]
    span = (morph.fingers - 1) * morph.finger_spacing
    for f in range(morph.fingers):
        off_x = f * morph.finger_spacing - 0.5 * span
        parent_link = 0
        for j in range(morph.joints_per_finger):
            ji = len(joints)
            joints.append(JointSpec(
                name=f"f{f}j{j}", parent_link=parent_link,
                offset=(off_x, 0.0, 0.0) if j == 0 else (0.0, 0.0, 0.0),
                inertia=morph.joint_inertia, damping=morph.joint_damping,
                armature=morph.joint_armature, lo=morph.joint_lo, hi=morph.joint_hi))
            tip = j == morph.joints_per_finger - 1
            links.append(LinkSpec(
                name=f"f{f}l{j}", parent_joint=ji, length=morph.link_lengths[j],
                kappa=morph.tip_kappa if tip else 0.0, omega=morph.link_omega))
            parent_link = len(links) - 1

    n_j = len(joints)
    muscles: list[MuscleSpec] = []
    for j in range(n_j):
        for sign, tag in ((+1.0, "flex"), (-1.0, "ext")):
            arms = [0.0] * n_j
            arms[j] = sign * morph.moment_arm
            muscles.append(MuscleSpec(morph.muscle, tuple(arms)))
    if morph.long_muscles:
        for sign in (+1.0, -1.0):
            arms = [sign * morph.long_moment_arm] * n_j
            muscles.append(MuscleSpec(morph.muscle, tuple(arms)))
    return PlantConfig(joints=tuple(joints), links=tuple(links),
                       muscles=tuple(muscles), root=root, hand_side=hand_side)


# ---------------------------------------------------------------------------
# stage settings

@dataclass
class TrackSettings:
    envs: int = 32
    rollout_ticks: int = 32
    total_ticks: int = 2_000_000
    chunk_frames: int = 120           # episode/chunk length C at 60 Hz
    zeta: float = 0.99
    eta: float = 5.0
    alpha: float = 0.5
    target_epochs: float = 20.0
    horizon: int = 4                  # future target frames fed to the encoder
    embed_dim: int = 32
    hidden: tuple[int, ...] = (128, 128, 64)
    log_std_init: float = -1.0
    error_cap: float = 0.05           # weighted position error, m
    policy_lr: float = 3e-4
    critic_lr: float = 1e-3
    lr_decay: float = 1.0             # final lr as a fraction of the initial
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    batch_size: int = 256
    epochs: int = 5
    entropy_coef: float = 0.0
    reference_count: int = 8
    reference_seconds: float = 4.0
    reference_kinds: tuple[str, ...] = ("sweep",)
    reference_seed: int = 1234
    eval_frames: int = 240
    log_every: int = 10


@dataclass
class DistillSettings:
    envs: int = 32
    track_checkpoint: str = ""        # stage-1 checkpoint path
    intervals_per_update: int = 4     # latent intervals collected per env
    max_updates: int = 1500
    lr: float = 3e-4
    beta: float = 0.005
    teacher_prob: float = 0.2
    error_cap: float = 0.1
    latent_dim: int = 32
    hidden: tuple[int, ...] = (128, 128, 64)
    eval_every: int = 50
    patience: int = 6                 # evals without improvement before stop
    min_updates: int = 200
    holdout_intervals: int = 8


@dataclass
class HandPlacement:
    side: str = "right"
    anchor: tuple[float, float, float] = (0.0, 0.0, 0.05)


@dataclass
class HighSettings:
    envs: int = 32
    rollout_frames: int = 8
    total_ticks: int = 5_000_000
    chunk_frames: int = 150           # episode length C at 60 Hz
    zeta: float = 0.95
    eta: float = 8.0
    alpha: float = 0.5
    goal_patterns: int = 5            # N upcoming key patterns in the goal
    timer_norm: float = 2.0
    hidden: tuple[int, ...] = (256, 256, 128)
    log_std_init: float = -0.5
    policy_lr: float = 3e-4
    critic_lr: float = 1e-3
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    batch_size: int = 256
    epochs: int = 5
    entropy_coef: float = 0.0
    objective_weights: tuple[float, float, float] = (0.8, 0.05, 0.15)
    disc_lr: float = 1e-5
    disc_batch: int = 512
    disc_heads: int = 32
    disc_hidden: tuple[int, ...] = (128, 128)
    lambda_gp: float = 10.0
    hands: tuple[HandPlacement, ...] = (HandPlacement(),)
    decoder_checkpoints: tuple[str, ...] = ()   # one stage-2 path per hand
    hand_policy: str = "split_point"  # or "annotation"
    split_key: int = 39
    lead_in_frames: int = 0           # evaluation starts this early
    tail_frames: int = 30
    log_every: int = 10
    eval_every: int = 0               # 0 = final evaluation only


DEFAULT_KEYBOARD = dict(n_keys=8, key_width=0.0225, gap=0.0011,
                        key_length=0.15, x0=0.0, y0=0.0, z_top=0.0)


@dataclass
class RunConfig:
    """Everything one CLI invocation needs."""

    raw: dict
    seed: int
    out_dir: Path
    base_dir: Path = Path(".")

    def fingerprint(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- section accessors --------------------------------------------------

    def _dataclass(self, cls, section: str):
        data = dict(self.raw.get(section) or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
        for f in fields(cls):
            if f.name in data and isinstance(getattr(cls, f.name, None), tuple):
                data[f.name] = tuple(data[f.name])
        return cls(**_coerce_tuples(cls, data))

    def track(self) -> TrackSettings:
        return self._dataclass(TrackSettings, "track")

    def distill(self) -> DistillSettings:
        return self._dataclass(DistillSettings, "distill")

    def high(self) -> HighSettings:
        data = dict(self.raw.get("high") or {})
        hands = data.pop("hands", None)
        cfg = self._dataclass(HighSettings, "high") if not hands else None
        if hands is not None:
            placements = tuple(
                HandPlacement(side=h.get("side", "right"),
                              anchor=tuple(h.get("anchor", (0.0, 0.0, 0.05))))
                for h in hands)
            tmp = dict(self.raw.get("high") or {})
            tmp.pop("hands")
            base = RunConfig({"high": tmp}, self.seed, self.out_dir)._dataclass(
                HighSettings, "high")
            cfg = replace(base, hands=placements)
        return cfg

    def plant_config(self, hand_side: str | None = None,
                     anchor: tuple[float, float, float] | None = None) -> PlantConfig:
        section = dict(self.raw.get("plant") or {})
        root_kw = dict(section.get("root") or {})
        for key in ("dofs", "lo", "hi", "rest", "anchor"):
            if key in root_kw:
                root_kw[key] = tuple(root_kw[key])
        if anchor is not None:
            root_kw["anchor"] = tuple(anchor)
        root = RootSpec(**root_kw)
        side = hand_side or section.get("hand_side", "right")
        morph_kw = dict(section.get("morphology") or {})
        muscle_kw = morph_kw.pop("muscle", None)
        if "link_lengths" in morph_kw:
            morph_kw["link_lengths"] = tuple(morph_kw["link_lengths"])
        if muscle_kw:
            morph_kw["muscle"] = MuscleParams(**muscle_kw)
        return planar_hand(Morphology(**morph_kw), root=root, hand_side=side)

    def keyboard_config(self) -> KeyboardConfig:
        kw = dict(DEFAULT_KEYBOARD)
        kw.update(self.raw.get("keyboard") or {})
        return KeyboardConfig.uniform(**kw)

    def score_source(self) -> tuple[str, bytes]:
        """Returns (kind, data) with kind 'text' or 'midi'."""
        section = self.raw.get("score")
        if section is None:
            raise ConfigError("config has no score section")
        if isinstance(section, dict) and "inline" in section:
            return "text", section["inline"].encode()
        path = section["path"] if isinstance(section, dict) else section
        p = Path(path)
        if not p.is_absolute():
            p = self.base_dir / p
        if not p.exists():
            raise ConfigError(f"score file not found: {p}")
        kind = "midi" if p.suffix.lower() in (".mid", ".midi", ".smf") else "text"
        return kind, p.read_bytes()


def _coerce_tuples(cls, data: dict) -> dict:
    out = dict(data)
    proto = cls()
    for f in fields(cls):
        if f.name in out and isinstance(getattr(proto, f.name), tuple) \
                and not isinstance(out[f.name], tuple):
            out[f.name] = tuple(out[f.name])
    return out


def load_run_config(path, seed: int, out_dir) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    raw = yaml.safe_load(p.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    cfg = RunConfig(raw=raw, seed=int(seed), out_dir=Path(out_dir),
                    base_dir=p.parent)
    cfg.raw.setdefault("seed", int(seed))
    return cfg


def seed_streams(seed: int, *names: str) -> dict[str, np.random.Generator]:
    """Independent named RNG streams derived from one seed."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(c))
            for n, c in zip(names, children)}
