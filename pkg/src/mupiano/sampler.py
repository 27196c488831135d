"""Power-scaled adaptive sampling over trajectory chunks.

Long reference trajectories are split into equally long, overlapping
chunks whose disjoint sampling sub-ranges partition the trajectory.
A running per-chunk performance estimate (discounted episode reward,
smoothed by a moving average) drives a categorical distribution that is
sharpened toward poorly performing chunks, so training keeps revisiting
the material it handles worst. The same machinery samples starting
notes for key-press training, with per-frame recall as the performance
signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

TARGET_EPOCHS_DEFAULT = 20


@dataclass(frozen=True)
class Chunk:
    """A window of one trajectory plus its disjoint sampling sub-range."""

    traj_id: int
    start: int
    end: int          # exclusive
    sample_start: int
    sample_end: int   # exclusive

    def __post_init__(self):
        if not (self.start <= self.sample_start < self.sample_end <= self.end):
            raise ValueError("sampling sub-range must be non-empty and inside the chunk")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class SamplerState:
    """Per-chunk running performance and the sampling hyperparameters.

    zeta discounts rewards inside an episode, eta sharpens the weight
    distribution, alpha is the moving-average coefficient, eps_scale and
    eps_floor are the two stability constants of the weight formula, and
    (r_min, r_max) are the theoretical bounds of the performance value.
    """

    chunks: list[Chunk]
    zeta: float = 0.99
    eta: float = 5.0
    alpha: float = 0.5
    eps_scale: float = 0.01
    eps_floor: float = 0.01
    r_min: float = 0.0
    r_max: float = 1.0
    init_fraction: float = 0.1
    r_bar: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.eta < 1.0:
            raise ValueError("eta must be >= 1")
        if self.r_max <= self.r_min:
            raise ValueError("r_max must exceed r_min")
        if self.r_bar is None:
            init = self.r_min + self.init_fraction * (self.r_max - self.r_min)
            self.r_bar = np.full(len(self.chunks), init, dtype=float)
        else:
            self.r_bar = np.asarray(self.r_bar, dtype=float).copy()

    def update(self, chunk_index: int, performance: float) -> None:
        """Moving-average update of one chunk's estimate, clamped to bounds."""
        old = self.r_bar[chunk_index]
        new = (1.0 - self.alpha) * old + self.alpha * performance
        self.r_bar[chunk_index] = min(max(new, self.r_min), self.r_max)

    def weights(self) -> np.ndarray:
        """Sampling probabilities, sharpened toward low-performing chunks."""
        num = self.r_max - self.r_min + self.eps_scale
        den = self.r_bar - self.r_min + self.eps_scale
        w = (num / den) ** self.eta - 1.0 + self.eps_floor
        return w / w.sum()

    def sample(self, rng: np.random.Generator) -> tuple[int, int]:
        """Draw a chunk index and a uniform start frame in its sampling range."""
        w = self.weights()
        idx = int(rng.choice(len(self.chunks), p=w))
        c = self.chunks[idx]
        frame = int(rng.integers(c.sample_start, c.sample_end))
        return idx, frame


def chunk_count(traj_len: int, chunk_len: int, env_count: int,
                rollout_len: int, target_epochs: float) -> int:
    """Number of chunks so that visiting them all takes ~target_epochs.

    Solves target_epochs = (count / env_count) * (chunk_len / rollout_len)
    for the count, then clamps to what the trajectory can host: at least
    enough chunks to cover it, at most one chunk per distinct start frame,
    and exactly one when the trajectory fits in a single chunk.
    """
    if traj_len <= chunk_len:
        return 1
    raw = round(target_epochs * env_count * rollout_len / chunk_len)
    cover = -(-traj_len // chunk_len)  # ceil division
    return max(min(raw, traj_len - chunk_len + 1), cover, 1)


def partition(traj_len: int, chunk_len: int, env_count: int, rollout_len: int,
              target_epochs: float = TARGET_EPOCHS_DEFAULT,
              traj_id: int = 0) -> list[Chunk]:
    """Split one trajectory into equal overlapping chunks.

    Chunk starts are spread evenly so consecutive sampling sub-ranges
    (start of chunk i to start of chunk i+1, the last one running to the
    trajectory end) partition the trajectory exactly.
    """
    if traj_len < 1:
        raise ValueError("trajectory must contain at least one frame")
    count = chunk_count(traj_len, chunk_len, env_count, rollout_len, target_epochs)
    length = min(chunk_len, traj_len)
    if count == 1:
        return [Chunk(traj_id, 0, traj_len, 0, traj_len)]
    span = traj_len - length
    starts = [round(i * span / (count - 1)) for i in range(count)]
    chunks = []
    for i, s in enumerate(starts):
        sample_end = starts[i + 1] if i + 1 < count else traj_len
        chunks.append(Chunk(traj_id, s, s + length, s, sample_end))
    return chunks


def episode_performance(rewards, chunk_len: int, zeta: float,
                        failed: bool = False) -> float:
    """Discounted episode reward, rescaled by the notional episode length.

    An episode that legitimately ends after L < chunk_len frames (it ran
    out of chunk) is upscaled by chunk_len / L. A failed episode instead
    counts the unplayed remainder as zero reward, i.e. it is treated as a
    full-length episode, so no upscaling applies.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("rewards must be a non-empty 1-d sequence")
    discounted = float(np.sum(zeta ** np.arange(r.size) * r))
    if failed:
        return discounted
    return chunk_len / r.size * discounted


def recall_performance(recalls_left, recalls_right, chunk_len: int,
                       zeta: float) -> float:
    """Episode performance driven by the worse hand's per-frame recall."""
    lo = np.minimum(np.asarray(recalls_left, dtype=float),
                    np.asarray(recalls_right, dtype=float))
    return episode_performance(lo, chunk_len, zeta)


def note_chunks(onsets_frames, score_len: int, chunk_len: int) -> list[Chunk]:
    """One chunk per note onset, spanning chunk_len frames or to score end.

    The sampling range of each chunk is the single frame of its onset, so
    sampling a chunk means starting an episode at that note.
    """
    onsets = sorted(set(int(f) for f in onsets_frames))
    if not onsets:
        raise ValueError("score has no note onsets")
    chunks = []
    for f in onsets:
        end = min(f + chunk_len, score_len)
        if end <= f:
            continue
        chunks.append(Chunk(0, f, end, f, f + 1))
    return chunks


def full_episode_bound(chunk_len: int, zeta: float) -> float:
    """Performance of a full-length episode with maximal unit rewards."""
    if zeta == 1.0:
        return float(chunk_len)
    return (1.0 - zeta ** chunk_len) / (1.0 - zeta)


def make_state(chunks: list[Chunk], chunk_len: int, zeta: float, eta: float,
               alpha: float = 0.5, **kw) -> SamplerState:
    """SamplerState with reward bounds derived from the episode length."""
    return SamplerState(chunks=chunks, zeta=zeta, eta=eta, alpha=alpha,
                        r_min=0.0, r_max=full_episode_bound(chunk_len, zeta), **kw)


def dump_csv(state: SamplerState, path) -> None:
    """Write per-chunk performance estimates for curriculum inspection."""
    with open(path, "w") as f:
        f.write("chunk,traj_id,start,end,sample_start,sample_end,r_bar,weight\n")
        w = state.weights()
        for i, c in enumerate(state.chunks):
            f.write(f"{i},{c.traj_id},{c.start},{c.end},{c.sample_start},"
                    f"{c.sample_end},{state.r_bar[i]!r},{w[i]!r}\n")


def snapshot(state: SamplerState) -> SamplerState:
    return replace(state, r_bar=state.r_bar.copy())
