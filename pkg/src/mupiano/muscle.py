"""Hill-type musculotendon units with rigid tendons.

Each unit is a unidirectional actuator: activation lags the control input
through a first-order filter with separate rise and fall time constants,
and force is the usual product of activation, an active force-length
curve and a force-velocity curve, plus a passive elastic term, scaled by
peak isometric force. The tendon is rigid, so fiber length is simply the
musculotendon length minus the tendon slack length.

All operations are pure and broadcast over numpy arrays, so a stacked
``MuscleParams`` (array-valued fields) evaluates a whole muscle set at
once.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

FIBER_FLOOR_DEFAULT = 0.01
ECCENTRIC_PLATEAU = 1.5


class MuscleInputError(ValueError):
    """Raised when a muscle operation receives a non-finite input."""


@dataclass(frozen=True)
class MuscleParams:
    """Parameters of one musculotendon unit.

    Fields may be scalars or equally shaped arrays (see :func:`stack_params`).
    Units: forces in N, lengths in m, velocities in optimal fiber lengths
    per second, time constants in s; curve shape parameters dimensionless.
    """

    f_max: float | np.ndarray = 40.0
    l_opt: float | np.ndarray = 0.03
    l_slack: float | np.ndarray = 0.10
    v_max: float | np.ndarray = 10.0
    tau_act: float | np.ndarray = 0.010
    tau_deact: float | np.ndarray = 0.040
    fl_width: float | np.ndarray = 0.5
    fv_shape: float | np.ndarray = 0.30
    fp_gain: float | np.ndarray = 1.0
    fp_knee: float | np.ndarray = 1.1

    def __post_init__(self):
        for f in fields(self):
            v = np.asarray(getattr(self, f.name), dtype=float)
            if not np.all(np.isfinite(v)):
                raise MuscleInputError(f"{f.name} must be finite")
            if f.name not in ("fp_gain",) and not np.all(v > 0):
                raise MuscleInputError(f"{f.name} must be positive")
        if not np.all(np.asarray(self.fp_gain) >= 0):
            raise MuscleInputError("fp_gain must be nonnegative")
        if not np.all(np.asarray(self.tau_act) < np.asarray(self.tau_deact)):
            raise MuscleInputError("tau_act must be smaller than tau_deact")
        w = np.asarray(self.fl_width)
        if not np.all((w > 0) & (w <= 1)):
            raise MuscleInputError("fl_width must lie in (0, 1]")
        if not np.all(np.asarray(self.fp_knee) >= 1):
            raise MuscleInputError("fp_knee must be >= 1")


def stack_params(params: list[MuscleParams]) -> MuscleParams:
    """Stack per-muscle parameters into one array-valued MuscleParams."""
    kw = {
        f.name: np.array([float(getattr(p, f.name)) for p in params])
        for f in fields(MuscleParams)
    }
    return MuscleParams(**kw)


def _as_finite(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise MuscleInputError(f"{name} must be finite")
    return arr


def _unwrap(x: np.ndarray):
    return float(x) if x.ndim == 0 else x


def activation_step(a, u, dt: float, params: MuscleParams):
    """Advance activation one step under control input u.

    Uses the exact solution of the first-order lag da/dt = (u - a)/tau,
    with tau = tau_act while rising (u > a) and tau_deact while falling.
    u is clipped to [0, 1] before use; the result always stays in [0, 1].
    """
    a_arr = _as_finite(a, "activation")
    u_arr = np.clip(_as_finite(u, "control"), 0.0, 1.0)
    if not np.isfinite(dt) or dt <= 0:
        raise MuscleInputError("dt must be positive and finite")
    tau = np.where(u_arr > a_arr, params.tau_act, params.tau_deact)
    out = u_arr + (a_arr - u_arr) * np.exp(-dt / tau)
    return _unwrap(np.clip(out, 0.0, 1.0))


def normalized_fiber_length(l_mt, params: MuscleParams,
                            floor: float = FIBER_FLOOR_DEFAULT):
    """Fiber length in optimal lengths, from musculotendon length.

    Rigid tendon: l_fiber = l_mt - l_slack. When l_mt does not exceed
    the slack length the result is clamped to ``floor`` and the second
    return value flags the saturation.
    """
    l_arr = _as_finite(l_mt, "l_mt")
    raw = (l_arr - params.l_slack) / params.l_opt
    saturated = raw <= floor
    out = np.where(saturated, floor, raw)
    return _unwrap(out), _unwrap(np.asarray(saturated))


def active_fl(l_norm, params: MuscleParams):
    """Active force-length scaling: a Gaussian peaking at optimal length."""
    l_arr = _as_finite(l_norm, "l_norm")
    return _unwrap(np.exp(-(((l_arr - 1.0) / params.fl_width) ** 2)))


def force_velocity(v_norm, params: MuscleParams):
    """Force-velocity scaling.

    Shortening (v_norm < 0) follows a Hill hyperbola reaching zero at
    v_norm = -1 (clamped below); lengthening saturates at the eccentric
    plateau of 1.5.
    """
    v_arr = _as_finite(v_norm, "v_norm")
    c = np.broadcast_to(np.asarray(params.fv_shape, dtype=float), v_arr.shape)
    shortening = np.maximum(0.0, (1.0 + v_arr) / (1.0 - np.minimum(v_arr, 0.0) / c))
    v_pos = np.maximum(v_arr, 0.0)
    lengthening = 1.0 + (ECCENTRIC_PLATEAU - 1.0) * v_pos / (v_pos + 0.1 * c)
    return _unwrap(np.where(v_arr < 0.0, shortening, lengthening))


def passive_force(l_norm, params: MuscleParams):
    """Passive elastic force: zero up to the knee, exponential beyond it."""
    l_arr = _as_finite(l_norm, "l_norm")
    stretch = np.maximum(0.0, l_arr - params.fp_knee)
    return _unwrap(params.fp_gain * (np.exp(stretch) - 1.0))


def muscle_force(params: MuscleParams, a, l_norm, v_norm):
    """Total tension in N. Muscles only pull, so the result is >= 0."""
    a_arr = _as_finite(a, "activation")
    if not np.all((a_arr >= 0.0) & (a_arr <= 1.0)):
        raise MuscleInputError("activation must lie in [0, 1]")
    active = a_arr * active_fl(l_norm, params) * force_velocity(v_norm, params)
    f = params.f_max * (active + passive_force(l_norm, params))
    return _unwrap(np.maximum(0.0, np.asarray(f)))
