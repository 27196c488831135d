import numpy as np
import pytest

from mupiano import rewards
from mupiano.plant import KeyboardConfig
from mupiano.rewards import TrackingWeights


W2 = TrackingWeights(np.array([1.0, 1.0]), np.array([1.0, 1.0]))


def _perfect(n_links=2, action=None):
    pos = np.zeros((n_links, 3))
    ang = np.zeros(n_links)
    a = np.zeros(4) if action is None else np.asarray(action)
    return rewards.tracking_reward(pos, ang, pos, ang, a, W2)


def test_tracking_reward_perfect_pose_zero_action():
    r, parts = _perfect()
    assert r == pytest.approx(1.0, abs=1e-12)
    assert parts.r_pos == 1.0 and parts.r_orient == 1.0 and parts.r_act == 1.0


def test_tracking_reward_all_ones_action():
    r, _ = _perfect(action=np.ones(6))
    assert r == pytest.approx(0.9 + 0.1 * np.exp(-1.0), abs=1e-12)


def test_tracking_reward_decays_to_action_term():
    pos = np.zeros((2, 3))
    far = pos + np.array([0.0, 100.0, 0.0])
    a = np.zeros(4)
    r, parts = rewards.tracking_reward(pos, np.zeros(2), far, np.zeros(2), a, W2)
    assert r == pytest.approx(0.9 * 0.5 * parts.r_orient + 0.1, abs=1e-9)


def test_tracking_reward_weighted_errors():
    w = TrackingWeights(np.array([3.0, 1.0]), np.array([1.0, 1.0])).normalized()
    pos = np.zeros((2, 3))
    target = np.array([[0.01, 0, 0], [0.03, 0, 0]])
    r, parts = rewards.tracking_reward(pos, np.zeros(2), target, np.zeros(2),
                                       np.zeros(2), w)
    e = 0.75 * 0.01 + 0.25 * 0.03
    assert parts.e_pos == pytest.approx(e)
    assert parts.r_pos == pytest.approx(0.7 * np.exp(-50 * e) + 0.3 * np.exp(-3 * e))


def test_tracking_reward_orientation_wraps():
    pos = np.zeros((1, 3))
    w = TrackingWeights(np.array([1.0]), np.array([1.0]))
    r1, p1 = rewards.tracking_reward(pos, np.array([0.1]), pos,
                                     np.array([0.1 + 2 * np.pi]), np.zeros(2), w)
    assert p1.e_orient == pytest.approx(0.0, abs=1e-12)


def test_tracking_reward_batched():
    pos = np.zeros((5, 2, 3))
    ang = np.zeros((5, 2))
    a = np.zeros((5, 4))
    r, _ = rewards.tracking_reward(pos, ang, pos, ang, a, W2)
    assert r.shape == (5,)


def test_r_act_symmetric_in_sign():
    _, up = _perfect(action=np.array([2.0, -1.0]))
    _, dn = _perfect(action=np.array([-2.0, 1.0]))
    assert up.r_act == dn.r_act


def test_tracking_weights_validation():
    with pytest.raises(ValueError):
        TrackingWeights(np.array([-1.0, 2.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        TrackingWeights(np.array([0.0, 0.0]), np.array([1.0, 1.0]))
    n = TrackingWeights(np.array([2.0, 2.0]), np.array([1.0, 3.0])).normalized()
    assert n.kappa.sum() == pytest.approx(1.0) and n.omega.sum() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# key geometry

KB = KeyboardConfig.uniform(n_keys=4, key_width=0.02, gap=0.002,
                            key_length=0.10, z_top=0.0)


def test_key_point_definition():
    pk = rewards.key_point(KB, 1)
    lo, hi = KB.lo[1], KB.hi[1]
    assert pk[0] == pytest.approx(0.5 * (lo[0] + hi[0]))
    assert pk[1] == pytest.approx(lo[1] + 0.9 * (hi[1] - lo[1]))
    assert pk[2] == pytest.approx(hi[2])


def test_key_distance_at_target_point():
    pk = rewards.key_point(KB, 0)
    d, over = rewards.key_distance(KB, 0, pk)
    assert np.allclose(d, 0.0) and over


def test_key_distance_pressing_drops_z():
    pk = rewards.key_point(KB, 0)
    tip = pk + np.array([0.0, 0.0, -0.005])   # inside box, below surface point
    d, over = rewards.key_distance(KB, 0, tip)
    assert over and d[2] == 0.0


def test_key_distance_y_scaling_above_keyboard():
    pk = rewards.key_point(KB, 0)
    tip = pk + np.array([-0.01, -0.10, 0.02])  # 1 cm lateral, 10 cm longitudinal
    d, over = rewards.key_distance(KB, 0, tip)
    assert not over
    assert d[0] == pytest.approx(0.01)
    assert d[1] == pytest.approx(0.01)   # 0.1 * 0.10
    assert d[2] == pytest.approx(-0.02)


def test_key_distance_below_but_not_over_keeps_z():
    pk = rewards.key_point(KB, 0)
    tip = pk + np.array([0.05, 0.0, -0.005])   # outside the box laterally
    d, over = rewards.key_distance(KB, 0, tip)
    assert not over and d[2] != 0.0


# ---------------------------------------------------------------------------
# key reward

def _kr(targets_h, targets_all, tips, depth, prev=None, **kw):
    depth = np.asarray(depth, float) * KB.max_dip
    prev = np.zeros(KB.n_keys, bool) if prev is None else np.asarray(prev, bool)
    return rewards.key_reward(targets_h, targets_all, tips, depth, prev, KB, **kw)


FAR_TIP = np.array([[10.0, 10.0, 10.0]])


def test_key_reward_empty_targets_rest():
    out = _kr(set(), set(), FAR_TIP, np.zeros(4))
    assert out.reward == 1.0


def test_key_reward_perfect_press():
    tip = rewards.key_point(KB, 1) + np.array([0, 0, -1e-9])
    out = _kr({1}, {1}, tip[None], [0, 1.0, 0, 0])
    assert out.reward == pytest.approx(1.0, abs=1e-6)
    assert out.matches == {1: 0}


def test_key_reward_nontarget_penalty_fixture():
    out = _kr(set(), set(), FAR_TIP, [0.5, 0, 0, 0])
    assert 1.0 - out.reward == pytest.approx(0.2 * 0.5 ** 6, abs=1e-12)
    assert out.negative == pytest.approx(0.003125, abs=1e-15)


def test_key_reward_intermittent_press_zeroed():
    tip = rewards.key_point(KB, 1)
    prev = np.array([False, True, False, False])
    held = _kr({1}, {1}, tip[None], [0, 0.95, 0, 0], prev)
    dropped = _kr({1}, {1}, tip[None], [0, 0.85, 0, 0], prev)
    # released below threshold right after a press: press term removed
    assert dropped.positive == pytest.approx(0.6 * 1.0, abs=1e-9)
    assert held.positive == pytest.approx(0.6 + 0.4 * 0.95 ** 3, abs=1e-9)


def test_key_reward_monotone_in_nontarget_depth():
    last = 2.0
    for depth in (0.0, 0.3, 0.6, 0.9):
        out = _kr({1}, {1}, FAR_TIP, [depth, 0, 0, 0])
        assert out.reward < last
        last = out.reward


def test_key_reward_occupancy_matching():
    # two targets, two fingers: each key must get its own finger
    t0 = rewards.key_point(KB, 0)
    t1 = rewards.key_point(KB, 1)
    tips = np.stack([t0, t1 + np.array([0.001, 0, 0])])
    out = _kr({0, 1}, {0, 1}, tips, np.zeros(4))
    assert out.matches[0] == 0 and out.matches[1] == 1


def test_key_reward_ties_resolve_to_lower_finger_index():
    pk = rewards.key_point(KB, 2)
    tips = np.stack([pk, pk])
    out = _kr({2}, {2}, tips, np.zeros(4))
    assert out.matches[2] == 0


def test_key_reward_more_keys_than_fingers():
    out = _kr({0, 1, 2}, {0, 1, 2}, FAR_TIP, np.zeros(4))
    assert set(out.matches.values()) == {0}
    assert len(out.matches) == 3


def test_key_reward_explicit_assignment():
    t0 = rewards.key_point(KB, 0)
    tips = np.stack([t0, t0 + np.array([0, 0, 0.02])])
    out = _kr({0}, {0}, tips, np.zeros(4), finger_assignment={0: 1})
    assert out.matches[0] == 1


def test_key_reward_bounds():
    rng = np.random.default_rng(4)
    for _ in range(200):
        tips = rng.uniform(-0.1, 0.2, (2, 3))
        depth = rng.uniform(0, 1, 4)
        prev = rng.random(4) < 0.5
        out = _kr({1}, {1, 2}, tips, depth, prev)
        assert 0.0 <= out.positive <= 1.0
        assert 0.0 <= out.negative <= 0.2 * 3


# ---------------------------------------------------------------------------
# frame scores

def test_frame_scores_fixtures():
    assert rewards.frame_scores({1, 2}, {1, 2}) == (1.0, 1.0, 1.0)
    assert rewards.frame_scores(set(), {1}) == (1.0, 0.0, 0.0)
    p, r, f1 = rewards.frame_scores({1, 2}, {1})
    assert (p, r) == (0.5, 1.0) and f1 == pytest.approx(2 / 3)
    assert rewards.frame_scores(set(), set()) == (1.0, 1.0, 1.0)


def test_micro_f1_matches_replay():
    rng = np.random.default_rng(8)
    frames = []
    for _ in range(300):
        pressed = set(rng.choice(10, rng.integers(0, 4), replace=False).tolist())
        target = set(rng.choice(10, rng.integers(0, 4), replace=False).tolist())
        frames.append((pressed, target))
    p, r, f1 = rewards.micro_f1(frames)
    tp = sum(len(a & b) for a, b in frames)
    fp = sum(len(a - b) for a, b in frames)
    fn = sum(len(b - a) for a, b in frames)
    assert p == pytest.approx(tp / (tp + fp))
    assert r == pytest.approx(tp / (tp + fn))
    assert f1 == pytest.approx(2 * p * r / (p + r))
