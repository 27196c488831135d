import numpy as np
import pytest
from scipy import stats

from mupiano import sampler
from mupiano.sampler import Chunk, SamplerState


def test_partition_single_chunk_when_trajectory_fits():
    chunks = sampler.partition(120, 120, env_count=8, rollout_len=32)
    assert len(chunks) == 1
    assert chunks[0].start == 0 and chunks[0].end == 120
    assert chunks[0].sample_start == 0 and chunks[0].sample_end == 120


def test_partition_two_nonoverlapping():
    # formula tuned to yield exactly 2 chunks on a 2C trajectory
    chunks = sampler.partition(240, 120, env_count=1, rollout_len=12,
                               target_epochs=20)
    assert len(chunks) == 2
    assert [c.start for c in chunks] == [0, 120]
    assert [(c.sample_start, c.sample_end) for c in chunks] == [(0, 120), (120, 240)]


def test_partition_count_formula_brute_force():
    traj, C, envs, rollout, epochs = 10_000, 1440, 8192, 32, 20
    chunks = sampler.partition(traj, C, envs, rollout, epochs)
    expected = round(epochs * envs * rollout / C)
    expected = max(min(expected, traj - C + 1), -(-traj // C), 1)
    assert len(chunks) == expected


def test_partition_sampling_regions_partition_trajectory():
    for traj, C in ((1000, 120), (977, 150), (120, 120), (240, 97)):
        chunks = sampler.partition(traj, C, env_count=16, rollout_len=32)
        covered = []
        for c in chunks:
            assert c.length <= C
            assert c.sample_start >= c.start and c.sample_end <= c.end
            covered.extend(range(c.sample_start, c.sample_end))
        assert covered == list(range(traj))


def test_partition_chunks_equal_length():
    chunks = sampler.partition(1000, 120, env_count=16, rollout_len=32)
    assert len({c.length for c in chunks}) == 1


def test_episode_performance_fixtures():
    assert sampler.episode_performance(np.ones(100), 100, 1.0) == pytest.approx(100.0)
    assert sampler.episode_performance([1.0], 100, 0.99) == pytest.approx(100.0)
    assert sampler.episode_performance(np.zeros(10), 100, 0.99) == 0.0


def test_episode_performance_failed_skips_upscaling():
    r = [1.0, 1.0]
    ok = sampler.episode_performance(r, 100, 0.9, failed=False)
    bad = sampler.episode_performance(r, 100, 0.9, failed=True)
    assert ok == pytest.approx(50 * (1 + 0.9))
    assert bad == pytest.approx(1 + 0.9)


def test_episode_performance_linear_and_homogeneous():
    rng = np.random.default_rng(3)
    r = rng.uniform(0, 1, 37)
    base = sampler.episode_performance(r, 100, 0.97)
    assert sampler.episode_performance(3.5 * r, 100, 0.97) == pytest.approx(3.5 * base)
    r2 = rng.uniform(0, 1, 37)
    assert sampler.episode_performance(r + r2, 100, 0.97) == pytest.approx(
        base + sampler.episode_performance(r2, 100, 0.97))


def test_recall_performance_fixtures():
    ones = np.ones(50)
    both = sampler.recall_performance(ones, ones, 50, 0.95)
    assert both == pytest.approx(np.sum(0.95 ** np.arange(50)))
    assert sampler.recall_performance(np.zeros(50), ones, 50, 0.95) == 0.0
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 1, 30), rng.uniform(0, 1, 30)
    manual = float(np.sum(0.95 ** np.arange(30) * np.minimum(a, b))) * 50 / 30
    assert sampler.recall_performance(a, b, 50, 0.95) == pytest.approx(manual)


def _state(r_bar, **kw):
    chunks = [Chunk(0, i, i + 1, i, i + 1) for i in range(len(r_bar))]
    defaults = dict(zeta=0.99, eta=5.0, alpha=0.5, eps_scale=0.01,
                    eps_floor=0.01, r_min=0.0, r_max=1.0)
    defaults.update(kw)
    return SamplerState(chunks=chunks, r_bar=np.asarray(r_bar, float), **defaults)


def test_update_moving_average():
    s = _state([0.0, 0.0])
    s.update(0, 1.0)
    assert s.r_bar[0] == 0.5
    s2 = _state([0.3], alpha=1.0)
    s2.update(0, 0.9)
    assert s2.r_bar[0] == 0.9


def test_update_converges_geometrically():
    s = _state([0.0])
    for _ in range(60):
        s.update(0, 0.8)
    assert s.r_bar[0] == pytest.approx(0.8, abs=1e-12)


def test_update_clamps_to_bounds():
    s = _state([0.9], alpha=1.0)
    s.update(0, 5.0)
    assert s.r_bar[0] == 1.0


def test_weights_uniform_when_equal():
    s = _state([0.4, 0.4, 0.4, 0.4])
    assert np.allclose(s.weights(), 0.25, atol=1e-15)


def test_weights_hand_evaluated_fixture():
    s = _state([0.2, 0.5, 0.9], eta=5.0, eps_scale=0.01, eps_floor=0.01)
    raw = ((1.0 + 0.01) / (np.array([0.2, 0.5, 0.9]) + 0.01)) ** 5 - 1.0 + 0.01
    expected = raw / raw.sum()
    assert np.allclose(s.weights(), expected, atol=1e-12)


def test_weights_antitone_random_states():
    rng = np.random.default_rng(11)
    for _ in range(10_000 // 4):
        r = np.sort(rng.uniform(0, 1, 4))
        w = _state(r, eta=float(rng.uniform(1, 9))).weights()
        assert np.all(np.diff(w) <= 1e-15)
        assert np.all(w > 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_sample_single_chunk():
    s = _state([0.5])
    rng = np.random.default_rng(0)
    assert s.sample(rng)[0] == 0


def test_sample_frequencies_chi_square():
    s = _state([0.2, 0.5, 0.9, 0.35])
    w = s.weights()
    rng = np.random.default_rng(42)
    draws = np.array([s.sample(rng)[0] for _ in range(100_000)])
    counts = np.bincount(draws, minlength=4)
    _, p = stats.chisquare(counts, w * draws.size)
    assert p > 0.01


def test_sample_deterministic_given_seed():
    s = _state([0.2, 0.5, 0.9])
    a = [s.sample(np.random.default_rng(9)) for _ in range(5)]
    b = [s.sample(np.random.default_rng(9)) for _ in range(5)]
    assert a == b


def test_sample_start_frame_inside_sampling_region():
    chunks = sampler.partition(1000, 120, env_count=16, rollout_len=32)
    s = sampler.make_state(chunks, 120, zeta=0.99, eta=5.0)
    rng = np.random.default_rng(5)
    for _ in range(500):
        idx, frame = s.sample(rng)
        c = chunks[idx]
        assert c.sample_start <= frame < c.sample_end


def test_note_chunks():
    chunks = sampler.note_chunks([0, 30, 30, 95], 120, 150)
    assert [(c.start, c.end) for c in chunks] == [(0, 120), (30, 120), (95, 120)]
    assert all(c.sample_end - c.sample_start == 1 for c in chunks)


def test_full_episode_bound():
    assert sampler.full_episode_bound(100, 1.0) == 100.0
    assert sampler.full_episode_bound(100, 0.95) == pytest.approx(
        float(np.sum(0.95 ** np.arange(100))))


def test_dump_csv(tmp_path):
    s = _state([0.2, 0.5])
    path = tmp_path / "sampler.csv"
    sampler.dump_csv(s, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("chunk,") and len(lines) == 3
