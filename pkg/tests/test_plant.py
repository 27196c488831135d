import numpy as np
import pytest
import sympy

from mupiano import muscle
from mupiano.plant import (KeyboardConfig, Plant, PlantConfig, RootSpec,
                           SimulationDiverged, TICK_DT)
from mupiano.pipeline.config import Morphology, planar_hand


def finger_plant(fingers=1, root_dofs=(), long_muscles=False, **kw):
    root = RootSpec(dofs=root_dofs, lo=(-0.1,) * len(root_dofs),
                    hi=(0.1,) * len(root_dofs), rest=(0.0,) * len(root_dofs))
    morph = Morphology(fingers=fingers, long_muscles=long_muscles, **kw)
    return Plant(planar_hand(morph, root=root))


def piano_plant(n_keys=4, **kb_kw):
    kb = KeyboardConfig.uniform(n_keys=n_keys, key_length=0.12, **kb_kw)
    root = RootSpec(dofs=("x", "z"), lo=(-0.1, -0.01), hi=(0.1, 0.06),
                    rest=(0.0, 0.03),
                    anchor=(float(kb.key_centers().mean()), 0.028, 0.0))
    cfg = planar_hand(Morphology(fingers=1, long_muscles=False), root=root)
    return Plant(cfg, kb), kb


# ---------------------------------------------------------------------------
# config validation

def test_config_requires_antagonist_pairs():
    cfg = planar_hand(Morphology(fingers=1, long_muscles=False))
    muscles = tuple(m for m in cfg.muscles if min(m.moment_arms) >= 0 or
                    m.moment_arms.index(min(m.moment_arms)) != 0)
    with pytest.raises(ValueError, match="agonist"):
        PlantConfig(joints=cfg.joints, links=cfg.links,
                    muscles=tuple(m for m in cfg.muscles
                                  if not (m.moment_arms[0] < 0)),
                    root=cfg.root)


def test_config_counts():
    p = finger_plant(fingers=3, root_dofs=("x", "z"), long_muscles=True)
    assert p.n_joints == 6 and p.n_muscles == 14 and p.n_root == 2
    assert p.n_dofs == 8 and p.action_dim == 16
    assert len(p.fingertip_links) == 3


def test_keyboard_validation():
    with pytest.raises(ValueError, match="overlap"):
        KeyboardConfig(lo=np.array([[0, 0, -0.02], [0.01, 0, -0.02]]),
                       hi=np.array([[0.02, 0.1, 0.0], [0.03, 0.1, 0.0]]))
    kb = KeyboardConfig.uniform(n_keys=8)
    assert kb.n_keys == 8
    assert kb.octave_span == pytest.approx(7 * (0.0225 + 0.0011))


# ---------------------------------------------------------------------------
# kinematics

def test_fk_rest_pose():
    p = finger_plant()
    poses = p.forward_kinematics(np.zeros((1, 2)))
    # palm at origin; links extend along +y
    assert np.allclose(poses.positions[0, 0], [0, 0, 0])
    assert np.allclose(poses.positions[0, 1], [0, 0.05, 0])
    assert np.allclose(poses.positions[0, 2], [0, 0.095, 0])
    assert np.allclose(poses.angles, 0)


def test_fk_right_angle():
    p = finger_plant()
    poses = p.forward_kinematics(np.array([[np.pi / 2, 0.0]]))
    # flexing the base joint 90 degrees points the finger straight down
    assert np.allclose(poses.positions[0, 2], [0, 0, -0.095], atol=1e-12)


def _sympy_fk(lengths, offsets):
    """Independent symbolic planar chain for one finger."""
    qs = sympy.symbols(f"q0:{len(lengths)}")
    y = offsets[0][1]
    z = offsets[0][2]
    phi = 0
    pts = []
    for L, q in zip(lengths, qs):
        phi = phi + q
        y = y + L * sympy.cos(phi)
        z = z - L * sympy.sin(phi)
        pts.append((y, z, phi))
    return qs, pts


def test_fk_matches_symbolic_oracle():
    p = finger_plant(joints_per_finger=2)
    qs, pts = _sympy_fk([0.05, 0.045], [(0, 0, 0), (0, 0, 0)])
    fy = sympy.lambdify(qs, [pt[0] for pt in pts])
    fz = sympy.lambdify(qs, [pt[1] for pt in pts])
    rng = np.random.default_rng(3)
    for _ in range(25):
        q = rng.uniform(-0.3, 1.8, 2)
        poses = p.forward_kinematics(q[None])
        ys, zs = fy(*q), fz(*q)
        for li in range(2):
            assert poses.positions[0, li + 1, 1] == pytest.approx(ys[li], abs=1e-10)
            assert poses.positions[0, li + 1, 2] == pytest.approx(zs[li], abs=1e-10)


def test_fk_velocities_match_finite_differences():
    p = finger_plant(fingers=2, root_dofs=("x", "z"))
    rng = np.random.default_rng(5)
    q = np.concatenate([[0.02, 0.01], rng.uniform(0, 1.2, 4)])[None]
    qd = np.concatenate([[0.05, -0.02], rng.uniform(-2, 2, 4)])[None]
    h = 1e-7
    a = p.forward_kinematics(q - h * qd, qd)
    b = p.forward_kinematics(q + h * qd, qd)
    mid = p.forward_kinematics(q, qd)
    fd = (b.positions - a.positions) / (2 * h)
    assert np.allclose(mid.lin_vel, fd, atol=1e-5)
    fd_ang = (b.angles - a.angles) / (2 * h)
    assert np.allclose(mid.ang_vel, fd_ang, atol=1e-5)


def test_muscle_geometry_calibration_and_signs():
    p = finger_plant()
    l_mt, v_mt = p.muscle_geometry(np.zeros((1, 2)), np.zeros((1, 2)))
    l_norm, _ = muscle.normalized_fiber_length(l_mt, p.params)
    assert np.allclose(l_norm, 1.0)
    # flexing joint 0 shortens its flexor (muscle 0) and lengthens its extensor
    q = np.array([[0.3, 0.0]])
    l2, _ = p.muscle_geometry(q, np.zeros((1, 2)))
    assert l2[0, 0] == pytest.approx(l_mt[0, 0] - 0.008 * 0.3)
    assert l2[0, 1] == pytest.approx(l_mt[0, 1] + 0.008 * 0.3)


def test_muscle_velocity_matches_finite_difference():
    p = finger_plant()
    rng = np.random.default_rng(1)
    q = rng.uniform(0, 1.0, (1, 2))
    qd = rng.uniform(-2, 2, (1, 2))
    h = 1e-7
    l0, _ = p.muscle_geometry(q - h * qd, qd)
    l1, _ = p.muscle_geometry(q + h * qd, qd)
    _, v = p.muscle_geometry(q, qd)
    assert np.allclose(v, (l1 - l0) / (2 * h), atol=1e-6)


# ---------------------------------------------------------------------------
# dynamics

def test_step_rest_is_fixed_point():
    p = finger_plant()
    s = p.rest_state()
    s2 = p.step(s, np.zeros((1, p.action_dim)))
    assert np.allclose(s2.q, s.q) and np.allclose(s2.qdot, 0)
    assert np.allclose(s2.act, 0)
    assert s2.t[0] == 1


def test_step_constant_flexion_monotone_to_limit():
    p = finger_plant()
    s = p.rest_state()
    controls = np.array([[1.0, 0.0, 1.0, 0.0]])  # both flexors on
    prev = -1.0
    for _ in range(960):
        s = p.step(s, controls)
        assert s.q[0, 0] >= prev - 1e-12
        prev = s.q[0, 0]
    hi = p.config.joints[0].hi
    assert s.q[0, 0] <= hi + 1e-12
    assert s.q[0, 0] > 0.9 * hi  # close to the limit after 2 s


def test_step_single_joint_matches_ode_solution():
    # one joint under constant torque: overdamped linear second-order system
    p = finger_plant()
    s = p.rest_state()
    u = np.array([[1.0, 0.0, 0.0, 0.0]])
    for _ in range(240):   # 0.5 s
        s = p.step(s, u)
    # independent reference: integrate the same ODE with tiny explicit steps
    from scipy.integrate import solve_ivp
    par = p.config.joints[0]
    I = par.inertia + par.armature
    stacked = p.params

    def rhs(t, y):
        q0, q1, w0, w1, a0 = y
        act = 1.0 - np.exp(-t / 0.010)
        l_mt, v_mt = p.muscle_geometry(np.array([[q0, q1]]), np.array([[w0, w1]]))
        l_norm, _ = muscle.normalized_fiber_length(l_mt, stacked)
        v_norm = v_mt / (stacked.v_max * stacked.l_opt)
        a_vec = np.array([act, 0, 0, 0])
        F = muscle.muscle_force(stacked, a_vec, l_norm[0], v_norm[0])
        tau = F @ p.R
        return [w0, w1,
                (tau[0] - par.damping * w0) / I,
                (tau[1] - par.damping * w1) / I,
                0.0]

    sol = solve_ivp(rhs, (0, 0.5), [0, 0, 0, 0, 0], rtol=1e-8, atol=1e-10)
    assert s.q[0, 0] == pytest.approx(sol.y[0, -1], rel=0.02)


def test_passive_energy_nonincreasing():
    p = finger_plant()
    s = p.rest_state()
    s.q[:, :] = [0.2, 0.1]       # inside the passive-free region
    s.qdot[:, :] = [1.5, -2.0]
    e = p.kinetic_energy(s)[0]
    for _ in range(200):
        s = p.step(s, np.zeros((1, 4)))
        e2 = p.kinetic_energy(s)[0]
        assert e2 <= e + 1e-15
        e = e2


def test_step_determinism_bitwise():
    p = finger_plant(fingers=2, root_dofs=("x", "z"), long_muscles=True)
    rng = np.random.default_rng(0)
    s1 = p.rest_state(batch=3)
    s2 = s1.copy()
    for _ in range(50):
        c = rng.uniform(-1, 1, (3, p.action_dim))
        s1 = p.step(s1, c)
        s2 = p.step(s2, c)
    assert np.array_equal(s1.q, s2.q) and np.array_equal(s1.qdot, s2.qdot)
    assert np.array_equal(s1.act, s2.act)


def test_joint_limits_always_respected():
    p = finger_plant()
    rng = np.random.default_rng(2)
    s = p.rest_state()
    for _ in range(500):
        s = p.step(s, rng.uniform(-1, 1, (1, 4)))
        assert np.all(s.q[0] >= [j.lo for j in p.config.joints])
        assert np.all(s.q[0] <= [j.hi for j in p.config.joints])


def test_step_rejects_nonfinite_controls():
    p = finger_plant()
    with pytest.raises(SimulationDiverged):
        p.step(p.rest_state(), np.array([[np.nan, 0, 0, 0]]))


# ---------------------------------------------------------------------------
# keys and contact

def test_contact_zero_above_keys():
    p, kb = piano_plant()
    s = p.rest_state()
    poses = p.forward_kinematics(s.q, s.qdot)
    c = p.contact_forces(poses, s.key_d, s.key_v)
    assert np.all(c.key_force == 0) and np.all(c.tip_force == 0)
    assert np.all(c.active_count == 0)


def test_contact_penetration_force_value():
    p, kb = piano_plant()
    # place the fingertip 1 mm below a key top at zero velocity
    pk = 0.5 * (kb.lo[1] + kb.hi[1])
    tip_target = np.array([pk[0], kb.lo[1, 1] + 0.02, -0.001])
    poses = p.forward_kinematics(p.rest_state().q, None)

    class FakePoses:
        positions = poses.positions.copy()
        lin_vel = np.zeros_like(poses.lin_vel)
        angles = poses.angles
        ang_vel = poses.ang_vel
        joint_base = poses.joint_base

    FakePoses.positions[0, p.fingertip_links[0]] = tip_target
    c = p.contact_forces(FakePoses, np.zeros((1, kb.n_keys)),
                         np.zeros((1, kb.n_keys)))
    assert c.key_force[0, 1] == pytest.approx(kb.contact_stiffness * 0.001)
    assert c.tip_force[0, 0, 2] == pytest.approx(kb.contact_stiffness * 0.001)
    assert np.all(c.key_force[0, [0, 2, 3]] == 0)


def test_contact_window_gating_never_drops_forces_for_small_hands():
    p, kb = piano_plant(n_keys=4)
    rng = np.random.default_rng(6)
    s = p.rest_state()
    for _ in range(20):
        s.q[0] = rng.uniform([-0.05, 0.0, 0.0, 0.0], [0.05, 0.03, 1.5, 1.5])
        s.qdot[0] = rng.uniform(-1, 1, 4)
        poses = p.forward_kinematics(s.q, s.qdot)
        tips, tipv = p.fingertips(poses)
        c = p.contact_forces(poses, s.key_d, s.key_v)
        # oracle: recompute with every key enabled (no window gating)
        x, y, z = tips[..., 0], tips[..., 1], tips[..., 2]
        in_box = ((kb.lo[:, 0] <= x[..., None]) & (x[..., None] < kb.hi[:, 0]) &
                  (kb.lo[:, 1] <= y[..., None]) & (y[..., None] < kb.hi[:, 1]))
        pen = kb.hi[:, 2][None, None, :] - s.key_d[:, None, :] - z[..., None]
        rate = -s.key_v[:, None, :] - tipv[..., 2][..., None]
        raw = kb.contact_stiffness * pen + kb.contact_damping * rate
        f = np.where(in_box & (pen > 0) & (raw > 0), raw, 0.0)
        assert np.allclose(c.key_force, f.sum(axis=1))


def test_contact_window_size_18_on_full_keyboard():
    kb = KeyboardConfig.uniform(n_keys=88)
    root = RootSpec(dofs=("x",), lo=(-0.5,), hi=(0.5,), rest=(0.0,),
                    anchor=(1.0, -0.06, 0.0))
    p = Plant(planar_hand(Morphology(fingers=3, long_muscles=False), root=root), kb)
    s = p.rest_state()
    poses = p.forward_kinematics(s.q, s.qdot)
    tips, _ = p.fingertips(poses)
    assert p.contact_window(tips).sum() == 18


def test_key_press_dynamics_to_equilibrium():
    p, kb = piano_plant()
    s = p.rest_state()
    # hold a virtual fingertip inside key 1 well below the surface by
    # pinning the hand pose each step (kinematic press)
    press_q = s.q.copy()
    pk = 0.5 * (kb.lo[1] + kb.hi[1])
    # solve joint angles that put the tip 5 mm under the key top
    from mupiano.pipeline.reference import fingertip_ik
    q = fingertip_ik(p, 0, np.array([pk[0], kb.lo[1, 1] + 0.9 * 0.12, -0.005]))
    s.q[0] = q
    for _ in range(240):     # 0.5 s
        s = p.step(s, np.zeros((1, p.action_dim)))
        s.q[0] = q           # clamp pose: pure key response
        s.qdot[:] = 0.0
    z_tip = p.forward_kinematics(s.q, s.qdot).positions[0, p.fingertip_links[0], 2]
    gap = kb.hi[1, 2] - z_tip
    d_eq = kb.contact_stiffness * gap / (kb.stiffness + kb.contact_stiffness)
    d_eq = min(d_eq, kb.max_dip)
    assert s.key_d[0, 1] == pytest.approx(d_eq, rel=0.05)


def test_key_deflection_bounds():
    p, kb = piano_plant()
    s = p.rest_state()
    rng = np.random.default_rng(9)
    for _ in range(600):
        s = p.step(s, rng.uniform(-1, 1, (1, p.action_dim)))
        assert np.all(s.key_d >= 0) and np.all(s.key_d <= kb.max_dip + 1e-15)


def test_key_press_set_strict_threshold():
    # unit max_dip keeps the deflection ratios exactly representable
    p, kb = piano_plant(max_dip=1.0)
    s = p.rest_state()
    s.key_d[0, 2] = 0.95
    assert p.key_press_set(s) == {2}
    s.key_d[0, 2] = 0.9    # boundary is strict
    assert p.key_press_set(s) == set()
    s.key_d[0] = 0.0
    assert p.key_press_set(s) == set()


def test_refresh_pressed_prev():
    p, kb = piano_plant()
    s = p.rest_state()
    s.key_d[0, 1] = 0.99 * kb.max_dip
    s2 = p.refresh_pressed_prev(s)
    assert s2.pressed_prev[0, 1] and not s.pressed_prev[0, 1]


def test_proprioception_shape_and_locality():
    p = finger_plant(fingers=2, root_dofs=("x", "z"))
    s = p.rest_state(batch=4)
    obs = p.proprioception(s)
    assert obs.shape == (4, p.proprio_dim)
    assert np.all(np.isfinite(obs))
    # anchored translation does not change local features
    root = RootSpec(dofs=("x", "z"), lo=(-0.1, -0.1), hi=(0.1, 0.1),
                    rest=(0.0, 0.0), anchor=(5.0, 2.0, 1.0))
    p2 = Plant(planar_hand(Morphology(fingers=2, long_muscles=False), root=root))
    obs2 = p2.proprioception(p2.rest_state(batch=4))
    assert np.allclose(obs, obs2)
