"""Planar over-actuated hand plant with spring-loaded piano keys.

The hand is a set of serial finger chains on a translating root. Each
revolute joint pitches its link in the y-z plane (positive = flexion,
tip moving down); the root translates along the keyboard (x) and
vertically (z) under direct force control. Muscles act through constant
signed moment arms, so musculotendon length is linear in the joint
angles. Joint dynamics are decoupled second-order systems integrated
semi-implicitly (damping handled implicitly, which keeps the stiff,
overdamped finger joints stable at 480 Hz).

Keys are vertical spring-damper sliders. A fingertip whose xy position
lies inside a key's box and below its moving top surface exerts a
penalty contact force on the key and receives the opposite reaction;
only a window of keys below the hand's bounding box is tested.

All state arrays carry a leading batch dimension so many environments
step in lockstep.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import muscle
from .rewards import TrackingWeights

TICK_DT = 1.0 / 480.0
TICKS_PER_FRAME = 8
OCTAVE_SPAN = 0.165
LINVEL_SCALE = 4.0    # m/s mapped to O(1) observation features
ANGVEL_SCALE = 20.0   # rad/s mapped to O(1)


class SimulationDiverged(RuntimeError):
    def __init__(self, tick: int):
        super().__init__(f"non-finite plant state at tick {tick}")
        self.tick = tick


@dataclass(frozen=True)
class RootSpec:
    """Directly force-actuated root coordinates ('x' and/or 'z')."""

    dofs: tuple[str, ...] = ("x", "z")
    mass: float = 0.2
    damping: float = 3.0
    force_scale: float = 6.0
    lo: tuple[float, ...] = (-0.15, -0.01)
    hi: tuple[float, ...] = (0.15, 0.08)
    rest: tuple[float, ...] = (0.0, 0.03)
    anchor: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(d not in ("x", "z") for d in self.dofs):
            raise ValueError("root dofs must be drawn from ('x', 'z')")
        for name in ("lo", "hi", "rest"):
            if len(getattr(self, name)) != len(self.dofs):
                raise ValueError(f"root {name} must match the dof count")


@dataclass(frozen=True)
class JointSpec:
    name: str
    parent_link: int
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    inertia: float = 4e-5
    damping: float = 0.05
    armature: float = 1e-4
    lo: float = -0.35
    hi: float = 1.9


@dataclass(frozen=True)
class LinkSpec:
    name: str
    parent_joint: int          # -1 for the palm link at the root
    length: float
    kappa: float = 0.0
    omega: float = 0.0


@dataclass(frozen=True)
class MuscleSpec:
    params: muscle.MuscleParams
    moment_arms: tuple[float, ...]   # signed, m, one entry per joint


@dataclass(frozen=True)
class PlantConfig:
    joints: tuple[JointSpec, ...]
    links: tuple[LinkSpec, ...]
    muscles: tuple[MuscleSpec, ...]
    root: RootSpec = RootSpec()
    hand_side: str = "right"

    def __post_init__(self):
        if self.hand_side not in ("left", "right"):
            raise ValueError("hand_side must be 'left' or 'right'")
        n_j = len(self.joints)
        if n_j == 0 or len(self.links) == 0:
            raise ValueError("need at least one joint and one link")
        child_count = [0] * n_j
        for li, link in enumerate(self.links):
            if link.parent_joint >= 0:
                if link.parent_joint >= n_j:
                    raise ValueError(f"link {link.name}: unknown joint")
                child_count[link.parent_joint] += 1
                j = self.joints[link.parent_joint]
                if j.parent_link >= li:
                    raise ValueError("links must be listed parents-first")
        if any(c != 1 for c in child_count):
            raise ValueError("every joint must carry exactly one link")
        R = self.moment_arm_matrix()
        for j in range(n_j):
            col = R[:, j]
            if not (np.any(col > 0) and np.any(col < 0)):
                raise ValueError(
                    f"joint {self.joints[j].name} lacks an agonist/antagonist pair")
        if np.linalg.matrix_rank(R) < n_j:
            raise ValueError("moment-arm matrix does not span all joints")
        for j in self.joints:
            if j.inertia <= 0 or j.damping < 0 or j.armature < 0 or j.lo >= j.hi:
                raise ValueError(f"bad joint parameters for {j.name}")
        if any(l.kappa < 0 or l.omega < 0 for l in self.links):
            raise ValueError("tracking weights must be nonnegative")

    def moment_arm_matrix(self) -> np.ndarray:
        return np.array([m.moment_arms for m in self.muscles], dtype=float)

    def tracking_weights(self) -> TrackingWeights:
        return TrackingWeights(
            np.array([l.kappa for l in self.links]),
            np.array([l.omega for l in self.links]),
        ).normalized()


@dataclass(frozen=True)
class KeyboardConfig:
    """Key geometry and dynamics.

    lo/hi are per-key bounding boxes (K, 3) in meters; max_dip is the
    deflection of a fully pressed key; contact stiffness/damping govern
    the fingertip penalty force; contact_window is the number of keys
    collision-tested below the hand.
    """

    lo: np.ndarray
    hi: np.ndarray
    octave_span: float = OCTAVE_SPAN
    stiffness: float = 2.0
    damping: float = 0.05
    armature: float = 0.001
    max_dip: float = 0.01
    tau_press: float = 0.9
    contact_stiffness: float = 2000.0
    contact_damping: float = 5.0
    contact_window: int = 18

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 2 or lo.shape[1] != 3:
            raise ValueError("key boxes must have shape (K, 3)")
        if np.any(hi <= lo):
            raise ValueError("key boxes must have positive extent")
        order = np.argsort(lo[:, 0])
        if np.any(hi[order[:-1], 0] > lo[order[1:], 0] + 1e-12):
            raise ValueError("key boxes overlap in x")
        if self.max_dip <= 0 or not 0 < self.tau_press < 1:
            raise ValueError("bad key dynamics parameters")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n_keys(self) -> int:
        return self.lo.shape[0]

    @classmethod
    def uniform(cls, n_keys: int = 88, key_width: float = 0.0225,
                gap: float = 0.0011, key_length: float = 0.15,
                key_depth: float = 0.02, x0: float = 0.0, y0: float = 0.0,
                z_top: float = 0.0, **kw) -> "KeyboardConfig":
        pitch = key_width + gap
        lo = np.array([[x0 + k * pitch, y0, z_top - key_depth]
                       for k in range(n_keys)])
        hi = np.array([[x0 + k * pitch + key_width, y0 + key_length, z_top]
                       for k in range(n_keys)])
        return cls(lo=lo, hi=hi, octave_span=7 * pitch, **kw)

    def key_centers(self) -> np.ndarray:
        return 0.5 * (self.lo[:, 0] + self.hi[:, 0])


@dataclass
class PlantState:
    """Batched simulation state at one 480 Hz tick."""

    q: np.ndarray             # (B, D) root coordinates then joint angles
    qdot: np.ndarray          # (B, D)
    act: np.ndarray           # (B, M)
    key_d: np.ndarray         # (B, K)
    key_v: np.ndarray         # (B, K)
    pressed_prev: np.ndarray  # (B, K) bool, refreshed at 60 Hz frames
    t: np.ndarray             # (B,) tick index

    def copy(self) -> "PlantState":
        return PlantState(*(a.copy() for a in
                            (self.q, self.qdot, self.act, self.key_d,
                             self.key_v, self.pressed_prev, self.t)))

    @property
    def batch(self) -> int:
        return self.q.shape[0]


@dataclass
class LinkPoses:
    positions: np.ndarray    # (B, L, 3) distal end of each link
    angles: np.ndarray       # (B, L) cumulative pitch
    lin_vel: np.ndarray      # (B, L, 3)
    ang_vel: np.ndarray      # (B, L)
    joint_base: np.ndarray   # (B, J, 3) pivot of each joint


class ContactResult(NamedTuple):
    key_force: np.ndarray        # (B, K) downward force on each key
    tip_force: np.ndarray        # (B, F, 3) reaction on the fingertips
    key_force_static: np.ndarray  # (B, K) force without the key-rate term
    active_count: np.ndarray     # (B, K) touching fingertips per key


def key_step(keyboard: KeyboardConfig, key_d: np.ndarray, key_v: np.ndarray,
             contact: ContactResult | None, dt: float):
    """Advance the key spring-damper sliders one tick.

    The contact damping acting against the key's own velocity is folded
    into the implicit damping term; the remaining (static) contact force
    drives the update. Deflections are clamped to [0, max_dip] with
    velocity zeroing.
    """
    m, c, k = keyboard.armature, keyboard.damping, keyboard.stiffness
    if contact is None:
        force = 0.0
        c_eff = c
    else:
        force = contact.key_force_static
        c_eff = c + keyboard.contact_damping * contact.active_count
    key_v = ((key_v + dt * (force - k * key_d) / m) / (1.0 + dt * c_eff / m))
    key_d = key_d + dt * key_v
    kd = np.clip(key_d, 0.0, keyboard.max_dip)
    key_v = np.where(kd != key_d, 0.0, key_v)
    return kd, key_v


class Plant:
    """Vectorized plant; all methods are pure functions of their inputs."""

    def __init__(self, config: PlantConfig, keyboard: KeyboardConfig | None = None):
        self.config = config
        self.keyboard = keyboard
        self.n_joints = len(config.joints)
        self.n_root = len(config.root.dofs)
        self.n_dofs = self.n_root + self.n_joints
        self.n_links = len(config.links)
        self.n_muscles = len(config.muscles)
        self.n_keys = keyboard.n_keys if keyboard else 0

        self.params = muscle.stack_params([m.params for m in config.muscles])
        self.R = config.moment_arm_matrix()                      # (M, J)
        self.l_rest = np.asarray(self.params.l_slack + self.params.l_opt)

        mirror = -1.0 if config.hand_side == "left" else 1.0
        self._offsets = np.array([(mirror * j.offset[0],) + tuple(j.offset[1:])
                                  for j in config.joints])
        self._root_axis = {"x": 0, "z": 2}
        self._anchor = np.asarray(config.root.anchor, dtype=float)
        self._inertia = np.array([j.inertia + j.armature for j in config.joints])
        self._damping = np.array([j.damping for j in config.joints])
        self._jlo = np.array([j.lo for j in config.joints])
        self._jhi = np.array([j.hi for j in config.joints])
        self._lengths = np.array([l.length for l in config.links])

        # fingertips = leaf links that terminate a joint chain
        parent_links = {config.joints[l.parent_joint].parent_link
                        for l in config.links if l.parent_joint >= 0}
        self.fingertip_links = [i for i, l in enumerate(config.links)
                                if l.parent_joint >= 0 and i not in parent_links]
        self._ancestors = [self._joint_chain(i) for i in self.fingertip_links]

        vmax = np.asarray(self.params.v_max * self.params.l_opt)
        self._v_norm_scale = vmax

    def _joint_chain(self, link: int) -> list[int]:
        chain = []
        while self.config.links[link].parent_joint >= 0:
            j = self.config.links[link].parent_joint
            chain.append(j)
            link = self.config.joints[j].parent_link
            if link < 0:
                break
        return chain[::-1]

    # -- state construction -------------------------------------------------

    def rest_state(self, batch: int = 1) -> PlantState:
        q = np.zeros((batch, self.n_dofs))
        q[:, :self.n_root] = self.config.root.rest
        return PlantState(
            q=q,
            qdot=np.zeros((batch, self.n_dofs)),
            act=np.zeros((batch, self.n_muscles)),
            key_d=np.zeros((batch, self.n_keys)),
            key_v=np.zeros((batch, self.n_keys)),
            pressed_prev=np.zeros((batch, self.n_keys), dtype=bool),
            t=np.zeros(batch, dtype=np.int64),
        )

    def root_position(self, q: np.ndarray) -> np.ndarray:
        pos = np.broadcast_to(self._anchor, (q.shape[0], 3)).copy()
        for i, d in enumerate(self.config.root.dofs):
            pos[:, self._root_axis[d]] += q[:, i]
        return pos

    def root_velocity(self, qdot: np.ndarray) -> np.ndarray:
        vel = np.zeros((qdot.shape[0], 3))
        for i, d in enumerate(self.config.root.dofs):
            vel[:, self._root_axis[d]] += qdot[:, i]
        return vel

    # -- kinematics ---------------------------------------------------------

    def forward_kinematics(self, q: np.ndarray,
                           qdot: np.ndarray | None = None) -> LinkPoses:
        q = np.atleast_2d(q)
        qdot = np.zeros_like(q) if qdot is None else np.atleast_2d(qdot)
        B = q.shape[0]
        pos = np.zeros((B, self.n_links, 3))
        ang = np.zeros((B, self.n_links))
        vel = np.zeros((B, self.n_links, 3))
        angvel = np.zeros((B, self.n_links))
        jbase = np.zeros((B, self.n_joints, 3))

        root_p = self.root_position(q)
        root_v = self.root_velocity(qdot)
        qj = q[:, self.n_root:]
        qdj = qdot[:, self.n_root:]

        for li, link in enumerate(self.config.links):
            if link.parent_joint < 0:
                phi = np.zeros(B)
                base, base_v, w = root_p, root_v, np.zeros(B)
            else:
                j = link.parent_joint
                p = self.config.joints[j].parent_link
                pphi, pw = ang[:, p], angvel[:, p]
                o = self._offsets[j]
                cos_p, sin_p = np.cos(pphi), np.sin(pphi)
                oy = o[1] * cos_p + o[2] * sin_p
                oz = -o[1] * sin_p + o[2] * cos_p
                base = pos[:, p] + np.stack([np.full(B, o[0]), oy, oz], axis=1)
                base_v = vel[:, p] + pw[:, None] * np.stack(
                    [np.zeros(B), oz, -oy], axis=1)
                jbase[:, j] = base
                phi = pphi + qj[:, j]
                w = pw + qdj[:, j]
            cos, sin = np.cos(phi), np.sin(phi)
            L = link.length
            pos[:, li] = base + L * np.stack([np.zeros(B), cos, -sin], axis=1)
            vel[:, li] = base_v + L * w[:, None] * np.stack(
                [np.zeros(B), -sin, -cos], axis=1)
            ang[:, li] = phi
            angvel[:, li] = w
        return LinkPoses(pos, ang, vel, angvel, jbase)

    def fingertips(self, poses: LinkPoses) -> tuple[np.ndarray, np.ndarray]:
        idx = self.fingertip_links
        return poses.positions[:, idx], poses.lin_vel[:, idx]

    def muscle_geometry(self, q: np.ndarray,
                        qdot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Musculotendon lengths and velocities (constant moment arms)."""
        qj = np.atleast_2d(q)[:, self.n_root:]
        qdj = np.atleast_2d(qdot)[:, self.n_root:]
        l_mt = self.l_rest - qj @ self.R.T
        v_mt = -(qdj @ self.R.T)
        return l_mt, v_mt

    # -- contact ------------------------------------------------------------

    def contact_window(self, tips: np.ndarray,
                       keyboard: KeyboardConfig | None = None) -> np.ndarray:
        """Boolean (B, K) mask of keys tested for contact under the hand."""
        kb = keyboard or self.keyboard
        K = kb.n_keys
        window = min(kb.contact_window, K)
        pad = 0.5 * float(np.mean(kb.hi[:, 0] - kb.lo[:, 0]))
        bb_lo = tips[:, :, 0].min(axis=1) - pad
        bb_hi = tips[:, :, 0].max(axis=1) + pad
        # keys are constructed left-to-right; find the intersecting range
        a = np.searchsorted(kb.hi[:, 0], bb_lo, side="left")
        b = np.searchsorted(kb.lo[:, 0], bb_hi, side="right")
        b = np.maximum(b, a)
        extra = np.maximum(window - (b - a), 0)
        la = np.minimum(a, (extra + 1) // 2)
        rb = np.minimum(K - b, extra - la)
        la = np.minimum(a, extra - rb)
        a, b = a - la, b + rb
        ks = np.arange(K)
        return (ks >= a[:, None]) & (ks < b[:, None])

    def contact_forces(self, poses: LinkPoses, key_d: np.ndarray,
                       key_v: np.ndarray,
                       keyboard: KeyboardConfig | None = None) -> "ContactResult":
        """Fingertip-key penalty forces: k_c * penetration + c_c * rate.

        key_force is the instantaneous downward force per key summed
        over fingertips, tip_force the equal-opposite reaction. The
        static part (rate term of the key's own motion excluded) and
        the active contact count feed the implicit key integrator,
        which keeps the stiff contact damping stable on the light keys.
        """
        kb = keyboard or self.keyboard
        tips, tipv = self.fingertips(poses)
        window = self.contact_window(tips, kb)
        x, y, z = tips[..., 0], tips[..., 1], tips[..., 2]
        in_box = ((kb.lo[:, 0] <= x[..., None]) & (x[..., None] < kb.hi[:, 0]) &
                  (kb.lo[:, 1] <= y[..., None]) & (y[..., None] < kb.hi[:, 1]))
        top = kb.hi[:, 2][None, None, :] - key_d[:, None, :]
        pen = top - z[..., None]
        pen_rate = -key_v[:, None, :] - tipv[..., 2][..., None]
        touching = in_box & (pen > 0.0) & window[:, None, :]
        raw = kb.contact_stiffness * pen + kb.contact_damping * pen_rate
        active = touching & (raw > 0.0)
        f = np.where(active, raw, 0.0)
        key_force = f.sum(axis=1)
        tip_force = np.zeros_like(tips)
        tip_force[..., 2] = f.sum(axis=2)
        static = np.where(active, kb.contact_stiffness * pen
                          - kb.contact_damping * tipv[..., 2][..., None], 0.0)
        return ContactResult(key_force, tip_force, static.sum(axis=1),
                             active.sum(axis=1))

    def tip_force_wrench(self, poses: LinkPoses,
                         tip_force: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map fingertip forces to joint torques and root forces."""
        B = tip_force.shape[0]
        tau = np.zeros((B, self.n_joints))
        root_f = tip_force.sum(axis=1)
        for fi, li in enumerate(self.fingertip_links):
            tip = poses.positions[:, li]
            F = tip_force[:, fi]
            for j in self._ancestors[fi]:
                r = tip - poses.joint_base[:, j]
                tau[:, j] += r[:, 2] * F[:, 1] - r[:, 1] * F[:, 2]
        return tau, root_f

    # -- dynamics -----------------------------------------------------------

    def split_controls(self, controls: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Clip and split a control vector into muscle inputs and root forces."""
        c = np.atleast_2d(controls)
        u = np.clip(c[:, :self.n_muscles], 0.0, 1.0)
        root_cmd = np.clip(c[:, self.n_muscles:], -1.0, 1.0)
        return u, root_cmd * self.config.root.force_scale

    def step(self, state: PlantState, controls: np.ndarray,
             dt: float = TICK_DT,
             external_tip_force: np.ndarray | None = None,
             poses: LinkPoses | None = None) -> PlantState:
        """Advance one tick. Raises SimulationDiverged on non-finite state.

        external_tip_force (B, F, 3) applies fingertip forces computed
        outside (e.g. contact against a keyboard shared between hands);
        the built-in keyboard, when configured, handles its own contact.
        poses may pass precomputed kinematics of the current state.
        """
        if not np.all(np.isfinite(controls)):
            raise SimulationDiverged(int(state.t.max()))
        u, root_force = self.split_controls(controls)

        act = muscle.activation_step(state.act, u, dt, self.params)
        l_mt, v_mt = self.muscle_geometry(state.q, state.qdot)
        l_norm, _ = muscle.normalized_fiber_length(l_mt, self.params)
        v_norm = v_mt / self._v_norm_scale
        forces = muscle.muscle_force(self.params, act, l_norm, v_norm)
        tau = forces @ self.R                                    # (B, J)

        key_d, key_v = state.key_d, state.key_v
        contact = None
        tip_total = external_tip_force
        if self.keyboard is not None and self.n_keys:
            if poses is None:
                poses = self.forward_kinematics(state.q, state.qdot)
            contact = self.contact_forces(poses, key_d, key_v)
            tip_total = contact.tip_force if tip_total is None \
                else tip_total + contact.tip_force
        if tip_total is not None:
            if poses is None:
                poses = self.forward_kinematics(state.q, state.qdot)
            ctau, croot = self.tip_force_wrench(poses, tip_total)
            tau = tau + ctau
            for i, d in enumerate(self.config.root.dofs):
                root_force[:, i] += croot[:, self._root_axis[d]]

        q = state.q.copy()
        qdot = state.qdot.copy()
        # joints: implicit damping keeps the stiff joints stable at 480 Hz
        jslice = slice(self.n_root, None)
        qdot[:, jslice] = ((state.qdot[:, jslice] + dt * tau / self._inertia)
                           / (1.0 + dt * self._damping / self._inertia))
        if self.n_root:
            m, c = self.config.root.mass, self.config.root.damping
            qdot[:, :self.n_root] = ((state.qdot[:, :self.n_root]
                                      + dt * root_force / m) / (1.0 + dt * c / m))
        q += dt * qdot

        lo = np.concatenate([self.config.root.lo, self._jlo])
        hi = np.concatenate([self.config.root.hi, self._jhi])
        clipped = np.clip(q, lo, hi)
        qdot[clipped != q] = 0.0
        q = clipped

        if self.keyboard is not None and self.n_keys:
            key_d, key_v = key_step(self.keyboard, key_d, key_v, contact, dt)

        new = PlantState(q=q, qdot=qdot, act=act, key_d=key_d, key_v=key_v,
                         pressed_prev=state.pressed_prev.copy(), t=state.t + 1)
        for arr in (new.q, new.qdot, new.key_d):
            if not np.all(np.isfinite(arr)):
                raise SimulationDiverged(int(new.t.max()))
        return new

    # -- key-press queries ----------------------------------------------------

    def pressed_mask(self, state: PlantState, tau: float | None = None) -> np.ndarray:
        kb = self.keyboard
        tau = kb.tau_press if tau is None else tau
        return state.key_d / kb.max_dip > tau

    def key_press_set(self, state: PlantState, tau: float | None = None,
                      env: int = 0) -> set[int]:
        return set(np.flatnonzero(self.pressed_mask(state, tau)[env]).tolist())

    def refresh_pressed_prev(self, state: PlantState) -> PlantState:
        """Latch the pressed set; call once per 60 Hz frame."""
        return replace(state, pressed_prev=self.pressed_mask(state))

    # -- observation ----------------------------------------------------------

    def proprioception(self, state: PlantState,
                       poses: LinkPoses | None = None) -> np.ndarray:
        """Flattened per-link pose/velocity and per-muscle state features.

        Link positions are taken relative to the root anchor so the
        features are invariant to where the hand is mounted; velocities
        are rescaled to O(1).
        """
        if poses is None:
            poses = self.forward_kinematics(state.q, state.qdot)
        B = state.batch
        l_mt, v_mt = self.muscle_geometry(state.q, state.qdot)
        l_norm, _ = muscle.normalized_fiber_length(l_mt, self.params)
        parts = [
            (poses.positions - self._anchor).reshape(B, -1),
            poses.angles,
            (poses.lin_vel / LINVEL_SCALE).reshape(B, -1),
            poses.ang_vel / ANGVEL_SCALE,
            l_norm - 1.0,
            v_mt / self._v_norm_scale,
            state.act,
        ]
        return np.concatenate(parts, axis=1)

    @property
    def proprio_dim(self) -> int:
        return self.n_links * 8 + self.n_muscles * 3

    @property
    def action_dim(self) -> int:
        return self.n_muscles + self.n_root

    def kinetic_energy(self, state: PlantState) -> np.ndarray:
        e = 0.5 * np.sum(self._inertia * state.qdot[:, self.n_root:] ** 2, axis=1)
        if self.n_root:
            e = e + 0.5 * self.config.root.mass * np.sum(
                state.qdot[:, :self.n_root] ** 2, axis=1)
        return e
