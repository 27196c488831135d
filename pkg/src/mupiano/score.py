"""Note-event ingestion and goal encoding.

Two input formats are supported: a plain-text format with one note per
line (``onset duration pitch hand``) and a minimal subset of the
Standard MIDI File format (formats 0 and 1, note-on/note-off and
set-tempo only). Parsed notes are grouped into key-pressing patterns --
maximal time segments with a constant per-hand target key set -- and
encoded into the ternary goal matrix consumed by the key-press policies.

Pitch is a key index in 0..87 with A0 = 0 (MIDI note 21).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

N_KEYS = 88
MIDI_KEY_OFFSET = 21
DEFAULT_SPLIT_KEY = 39          # middle C
DEFAULT_TEMPO = 500000          # microseconds per quarter note
TIMER_NORM_DEFAULT = 2.0        # seconds

LEFT, RIGHT, UNASSIGNED = "left", "right", "unassigned"
_HAND_TAGS = {"L": LEFT, "R": RIGHT, "left": LEFT, "right": RIGHT}


class ScoreError(ValueError):
    """Malformed score input."""


@dataclass(frozen=True)
class NoteEvent:
    onset: float
    duration: float
    pitch: int
    hand: str = UNASSIGNED

    def __post_init__(self):
        if self.onset < 0 or not np.isfinite(self.onset):
            raise ScoreError("onset must be a finite nonnegative time")
        if self.duration <= 0 or not np.isfinite(self.duration):
            raise ScoreError("duration must be positive")
        if not 0 <= self.pitch < N_KEYS:
            raise ScoreError(f"pitch {self.pitch} outside 0..{N_KEYS - 1}")

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass
class Score:
    notes: list[NoteEvent] = field(default_factory=list)
    dropped_notes: int = 0   # events outside the keyboard range

    def sorted(self) -> "Score":
        key = lambda n: (n.onset, n.pitch, n.duration)
        return Score(sorted(self.notes, key=key), self.dropped_notes)

    @property
    def end(self) -> float:
        return max((n.offset for n in self.notes), default=0.0)

    def onsets(self) -> list[float]:
        return sorted(set(n.onset for n in self.notes))


@dataclass(frozen=True)
class KeyPattern:
    """Time segment over which the per-hand target key sets are constant."""

    keys_left: frozenset[int]
    keys_right: frozenset[int]
    start: float
    dur: float

    @property
    def end(self) -> float:
        return self.start + self.dur

    @property
    def keys(self) -> frozenset[int]:
        return self.keys_left | self.keys_right


# ---------------------------------------------------------------------------
# text format

def parse_text_score(data: bytes | str) -> Score:
    """Parse the line-oriented text format.

    Each non-comment line reads ``onset duration pitch hand`` with onset
    and duration in seconds and pitch as a key index. The hand tag is
    L/R/left/right; anything else maps to unassigned.
    """
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    notes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ScoreError(f"line {lineno}: expected 'onset duration pitch [hand]'")
        try:
            onset, duration = float(parts[0]), float(parts[1])
            pitch = int(parts[2])
        except ValueError as exc:
            raise ScoreError(f"line {lineno}: {exc}") from exc
        hand = _HAND_TAGS.get(parts[3], UNASSIGNED) if len(parts) == 4 else UNASSIGNED
        try:
            notes.append(NoteEvent(onset, duration, pitch, hand))
        except ScoreError as exc:
            raise ScoreError(f"line {lineno}: {exc}") from exc
    return Score(notes).sorted()


def render_text_score(score: Score) -> str:
    """Inverse of :func:`parse_text_score` on canonical scores."""
    tag = {LEFT: "L", RIGHT: "R", UNASSIGNED: "U"}
    lines = [f"{n.onset!r} {n.duration!r} {n.pitch} {tag[n.hand]}"
             for n in score.sorted().notes]
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Standard MIDI File subset

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ScoreError("truncated chunk")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.read(1)[0]

    def varint(self) -> int:
        value = 0
        for _ in range(4):
            b = self.u8()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise ScoreError("variable-length quantity longer than 4 bytes")


def _track_events(raw: bytes):
    """Yield (tick, status, data1, data2) channel events and (tick, 'tempo', value)."""
    r = _Reader(raw)
    tick = 0
    status = None
    while r.pos < len(raw):
        tick += r.varint()
        b = r.u8()
        if b == 0xFF:                      # meta event
            meta = r.u8()
            length = r.varint()
            payload = r.read(length)
            if meta == 0x51:
                if length != 3:
                    raise ScoreError("set-tempo event must carry 3 bytes")
                yield tick, "tempo", int.from_bytes(payload, "big")
            elif meta == 0x2F:
                return
        elif b in (0xF0, 0xF7):            # sysex: skip payload
            r.read(r.varint())
        else:
            if b & 0x80:
                status = b
                data1 = r.u8()
            else:
                if status is None:
                    raise ScoreError("data byte before any status byte")
                data1 = b
            kind = status & 0xF0
            two_byte = kind in (0x80, 0x90, 0xA0, 0xB0, 0xE0)
            data2 = r.u8() if two_byte else 0
            yield tick, status, data1, data2


def _tempo_map(events_per_track: list[list]) -> list[tuple[int, int]]:
    tempos = [(0, DEFAULT_TEMPO)]
    for events in events_per_track:
        for ev in events:
            if ev[1] == "tempo":
                tempos.append((ev[0], ev[2]))
    tempos.sort(key=lambda t: t[0])
    return tempos


def _tick_to_seconds(tempos: list[tuple[int, int]], division: int):
    """Piecewise-linear tick-to-seconds conversion from the tempo map."""
    ticks = [t for t, _ in tempos]
    seconds = [0.0]
    for i in range(1, len(tempos)):
        dt = (ticks[i] - ticks[i - 1]) * tempos[i - 1][1] / (1e6 * division)
        seconds.append(seconds[-1] + dt)

    def convert(tick: int) -> float:
        i = 0
        for j, t in enumerate(ticks):
            if t <= tick:
                i = j
            else:
                break
        return seconds[i] + (tick - ticks[i]) * tempos[i][1] / (1e6 * division)

    return convert


def parse_midi(data: bytes, track_hands: dict[int, str] | None = None) -> Score:
    """Parse a format 0/1 Standard MIDI File into a Score.

    Only note-on, note-off (a velocity-0 note-on counts as an off) and
    set-tempo are interpreted; other events are skipped. Notes outside
    the 88-key range are dropped and counted. ``track_hands`` optionally
    maps track index to a hand tag.
    """
    r = _Reader(data)
    if r.read(4) != b"MThd":
        raise ScoreError("bad header magic")
    if struct.unpack(">I", r.read(4))[0] != 6:
        raise ScoreError("unexpected header length")
    fmt, ntrks, division = struct.unpack(">HHH", r.read(6))
    if fmt not in (0, 1):
        raise ScoreError(f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise ScoreError("SMPTE time division is not supported")
    if division == 0:
        raise ScoreError("zero time division")

    tracks = []
    for _ in range(ntrks):
        if r.read(4) != b"MTrk":
            raise ScoreError("bad track magic")
        length = struct.unpack(">I", r.read(4))[0]
        tracks.append(list(_track_events(r.read(length))))

    convert = _tick_to_seconds(_tempo_map(tracks), division)
    notes, dropped = [], 0
    for ti, events in enumerate(tracks):
        hand = (track_hands or {}).get(ti, UNASSIGNED)
        open_notes: dict[tuple[int, int], list[int]] = {}
        for ev in events:
            if ev[1] == "tempo":
                continue
            tick, status, note, velocity = ev
            kind, channel = status & 0xF0, status & 0x0F
            if kind == 0x90 and velocity > 0:
                open_notes.setdefault((channel, note), []).append(tick)
            elif kind == 0x80 or (kind == 0x90 and velocity == 0):
                stack = open_notes.get((channel, note))
                if not stack:
                    continue  # orphan release
                on_tick = stack.pop(0)
                if not stack:
                    del open_notes[(channel, note)]
                pitch = note - MIDI_KEY_OFFSET
                if not 0 <= pitch < N_KEYS:
                    dropped += 1
                    continue
                on_s, off_s = convert(on_tick), convert(tick)
                if off_s > on_s:
                    notes.append(NoteEvent(on_s, off_s - on_s, pitch, hand))
        if open_notes:
            pitches = sorted(n for _, n in open_notes)
            raise ScoreError(f"track {ti}: unmatched note-on for notes {pitches}")
    return Score(notes, dropped).sorted()


# ---------------------------------------------------------------------------
# hand assignment, patterns, goal encoding

def assign_hands(score: Score, policy: str = "annotation",
                 split_key: int = DEFAULT_SPLIT_KEY) -> Score:
    """Resolve unassigned notes to a hand.

    ``annotation`` keeps tags as they are; ``split_point`` sends pitches
    below the split key to the left hand and the rest to the right.
    Explicit tags are never overridden.
    """
    if policy == "annotation":
        return score
    if policy != "split_point":
        raise ScoreError(f"unknown hand policy {policy!r}")
    notes = [
        n if n.hand != UNASSIGNED
        else replace(n, hand=LEFT if n.pitch < split_key else RIGHT)
        for n in score.notes
    ]
    return Score(notes, score.dropped_notes)


def build_patterns(score: Score) -> list[KeyPattern]:
    """Segment the score timeline into key-pressing patterns.

    Boundaries fall at every onset and offset; each segment records the
    keys active per hand; empty (zero-length) segments are dropped and
    adjacent identical segments merged. Unassigned notes count as
    right-hand targets.
    """
    if not score.notes:
        return []
    bounds = sorted({n.onset for n in score.notes} | {n.offset for n in score.notes})
    patterns: list[KeyPattern] = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b <= a:
            continue
        left, right = set(), set()
        for n in score.notes:
            if n.onset <= a and n.offset >= b:
                (left if n.hand == LEFT else right).add(n.pitch)
        seg = KeyPattern(frozenset(left), frozenset(right), a, b - a)
        prev = patterns[-1] if patterns else None
        if prev and prev.keys_left == seg.keys_left and prev.keys_right == seg.keys_right:
            patterns[-1] = KeyPattern(prev.keys_left, prev.keys_right,
                                      prev.start, seg.end - prev.start)
        else:
            patterns.append(seg)
    return patterns


def encode_goal(patterns: list[KeyPattern], t: float, horizon: int,
                n_keys: int = N_KEYS,
                timer_norm: float = TIMER_NORM_DEFAULT) -> np.ndarray:
    """Ternary goal matrix of the next ``horizon`` patterns.

    Each row holds one key entry per keyboard key (-1 left hand, +1
    right hand, 0 off; right wins a shared key) plus a trailing timer:
    remaining duration for the row-0 pattern active at time t, full
    duration for upcoming rows, normalized by ``timer_norm``. Time
    before the first pattern encodes as an empty row-0 pattern whose
    timer counts down to the first onset; rows past the end of the
    score are zero.
    """
    g = np.zeros((horizon, n_keys + 1), dtype=float)
    upcoming = [p for p in patterns if p.end > t]
    row = 0
    if upcoming and upcoming[0].start > t:
        g[0, n_keys] = (upcoming[0].start - t) / timer_norm
        row = 1
    for p in upcoming:
        if row >= horizon:
            break
        for k in p.keys_left:
            g[row, k] = -1.0
        for k in p.keys_right:
            g[row, k] = +1.0
        remaining = p.end - t if row == 0 else p.dur
        g[row, n_keys] = remaining / timer_norm
        row += 1
    return g


def key_targets_at(patterns: list[KeyPattern], t: float) -> tuple[set[int], set[int]]:
    """Target key sets (left, right) active at time t."""
    for p in patterns:
        if p.start <= t < p.end:
            return set(p.keys_left), set(p.keys_right)
    return set(), set()


def patterns_to_csv(patterns: list[KeyPattern], path) -> None:
    with open(path, "w") as f:
        f.write("start,dur,keys_left,keys_right\n")
        for p in patterns:
            lk = " ".join(str(k) for k in sorted(p.keys_left))
            rk = " ".join(str(k) for k in sorted(p.keys_right))
            f.write(f"{p.start!r},{p.dur!r},{lk},{rk}\n")
