"""Dynamic bicycle model in the track's Frenet frame, plus race interaction rules.

The state keeps body-frame velocities ``(v_tilde_x, v_tilde_y)``; the Frenet
velocities that move ``(p_x, p_y)`` are derived from them each step.  The
numeric kernels are numba-compiled because the MPC rolls the model out
thousands of times per race.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .errors import SingularFrenet

EPS_V = 0.1
SINGULAR_TOL = 1e-6


@dataclass
class CarState:
    p_x: float = 0.0
    p_y: float = 0.0
    phi: float = 0.0
    v_tilde_x: float = 0.0
    v_tilde_y: float = 0.0
    omega: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.p_x, self.p_y, self.phi, self.v_tilde_x, self.v_tilde_y, self.omega], dtype=float)

    @classmethod
    def from_array(cls, a) -> "CarState":
        return cls(*(float(v) for v in a))


@dataclass
class ControlInput:
    d: float = 0.0
    delta: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.d, self.delta], dtype=float)


@dataclass(frozen=True)
class VehicleParams:
    """Bicycle-model and Pacejka tyre parameters (SI units, steering rate per step)."""

    m: float = 600.0
    I_z: float = 900.0
    l_f: float = 1.1
    l_r: float = 1.3
    C1: float = 6500.0
    C2: float = 150.0
    C3: float = 100.0
    C4: float = 1.5
    B_f: float = 10.0
    C_f: float = 1.0
    D_f: float = 4500.0
    B_r: float = 10.0
    C_r: float = 1.0
    D_r: float = 4300.0
    d_min: float = -1.0
    d_max: float = 1.0
    delta_min: float = -0.25
    delta_max: float = 0.25
    delta_rate_min: float = -0.05
    delta_rate_max: float = 0.05

    def __post_init__(self):
        for name in ("m", "I_z", "l_f", "l_r", "D_f", "D_r"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.d_min < self.d_max:
            raise ValueError("need d_min < d_max")
        if not self.delta_min < self.delta_max:
            raise ValueError("need delta_min < delta_max")
        if not self.delta_rate_min <= 0 <= self.delta_rate_max:
            raise ValueError("steering rate box must contain 0")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.m, self.I_z, self.l_f, self.l_r, self.C1, self.C2, self.C3, self.C4,
             self.B_f, self.C_f, self.D_f, self.B_r, self.C_r, self.D_r, EPS_V]
        )

    def control_bounds(self) -> np.ndarray:
        return np.array([self.d_min, self.d_max, self.delta_min, self.delta_max,
                         self.delta_rate_min, self.delta_rate_max])

    @classmethod
    def from_json(cls, path) -> "VehicleParams":
        with open(path) as fh:
            doc = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown vehicle parameters: {sorted(unknown)}")
        return cls(**doc)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)


def default_vehicle_path() -> Path:
    return Path(__file__).with_name("data") / "vehicle.json"


@dataclass(frozen=True)
class InteractionConfig:
    unsafe_dist: float = 1.0
    w_max: float = 6.0

    def __post_init__(self):
        if self.unsafe_dist <= 0:
            raise ValueError("unsafe_dist must be positive")


# --------------------------------------------------------------------------- kernels


@numba.njit(cache=True)
def kappa_lookup(p_x, s, kappa, length, closed):
    if closed:
        p_x = p_x - length * math.floor(p_x / length)
    n = s.shape[0]
    if p_x <= s[0]:
        return kappa[0]
    if p_x >= s[n - 1]:
        return kappa[n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if s[mid] <= p_x:
            lo = mid
        else:
            hi = mid
    t = (p_x - s[lo]) / (s[hi] - s[lo])
    return kappa[lo] + t * (kappa[hi] - kappa[lo])


@numba.njit(cache=True)
def wrap_angle(a):
    # result in (-pi, pi]
    turns = math.ceil((a - math.pi) / (2.0 * math.pi))
    if turns == 0:
        return a
    return a - 2.0 * math.pi * turns


@numba.njit(cache=True)
def euler_step(x, d, delta, p, kap, dt, out):
    """One explicit Euler step; returns False when the Frenet map is singular."""
    p_y = x[1]
    phi = x[2]
    vx = x[3]
    vy = x[4]
    om = x[5]
    m = p[0]
    iz = p[1]
    lf = p[2]
    lr = p[3]
    denom = 1.0 - kap * p_y
    if abs(denom) < SINGULAR_TOL:
        return False
    vx_safe = max(vx, p[14])
    alpha_f = delta - math.atan((om * lf + vy) / vx_safe)
    alpha_r = math.atan((om * lr - vy) / vx_safe)
    f_fy = p[10] * math.sin(p[9] * math.atan(p[8] * alpha_f))
    f_ry = p[13] * math.sin(p[12] * math.atan(p[11] * alpha_r))
    f_rx = (p[4] - p[5] * vx) * d - p[6] - p[7] * vx * vx
    c = math.cos(phi)
    s = math.sin(phi)
    along = vx * c - vy * s
    v_fx = along / denom
    v_fy = vx * s + vy * c
    cd = math.cos(delta)
    sd = math.sin(delta)
    out[0] = x[0] + dt * v_fx
    out[1] = p_y + dt * v_fy
    out[2] = wrap_angle(phi + dt * (om - kap / denom * along))
    out[3] = vx + dt * (f_rx - f_fy * sd + m * vy * om) / m
    out[4] = vy + dt * (f_ry + f_fy * cd - m * vx * om) / m
    out[5] = om + dt * (f_fy * lf * cd - f_ry * lr) / iz
    return True


@numba.njit(cache=True)
def frenet_velocity(x, kap):
    denom = 1.0 - kap * x[1]
    c = math.cos(x[2])
    s = math.sin(x[2])
    return (x[3] * c - x[4] * s) / denom, x[3] * s + x[4] * c


# --------------------------------------------------------------------------- public API


def step(state: CarState, u: ControlInput, vp: VehicleParams, kappa_at: float, dt: float) -> CarState:
    """Advance one car by ``dt`` seconds; ``kappa_at`` is track curvature at ``state.p_x``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    x = state.to_array()
    if dt == 0:
        return CarState.from_array(x)
    if abs(1.0 - kappa_at * x[1]) < SINGULAR_TOL:
        raise SingularFrenet(f"1 - kappa*p_y = {1.0 - kappa_at * x[1]:.3g}")
    out = np.empty(6)
    euler_step(x, float(u.d), float(u.delta), vp.as_array(), float(kappa_at), float(dt), out)
    return CarState.from_array(out)


def frenet_velocities(state: CarState, kappa_at: float) -> tuple[float, float]:
    """Longitudinal and lateral velocity in the Frenet frame."""
    vx, vy = frenet_velocity(state.to_array(), float(kappa_at))
    return float(vx), float(vy)


def apply_interaction_rules(states: Sequence[CarState], cfg: InteractionConfig, track=None) -> list[CarState]:
    """Near-collision and off-track penalties applied after the dynamics step.

    Collision: for each pair closer than ``unsafe_dist`` the leading car (larger
    ``p_x``) keeps 1/2 of its body-frame longitudinal speed and the trailing
    car 1/3.  Pairs are evaluated on the pre-rule snapshot; a car involved in
    several pairs receives the strongest single penalty.  Equal ``p_x``: the
    lower index is treated as leading.  Off-track: speed halved, heading
    re-aligned (``phi = 0``) and ``p_y`` clamped to the boundary.

    ``track`` supplies the global frame for distances; without it Frenet
    coordinates are treated as Cartesian.
    """
    arr = np.array([s.to_array() for s in states])
    n = len(arr)
    if track is not None:
        gx, gy = track_xy(track, arr[:, 0], arr[:, 1])
    else:
        gx, gy = arr[:, 0], arr[:, 1]
    factor = np.ones(n)
    for i in range(n):
        for j in range(i + 1, n):
            if math.hypot(gx[i] - gx[j], gy[i] - gy[j]) < cfg.unsafe_dist:
                lead, trail = (i, j) if arr[i, 0] >= arr[j, 0] else (j, i)
                factor[lead] = min(factor[lead], 0.5)
                factor[trail] = min(factor[trail], 1.0 / 3.0)
    out = arr.copy()
    for i in range(n):
        if factor[i] == 0.5:
            out[i, 3] = arr[i, 3] / 2.0
        elif factor[i] < 0.5:
            out[i, 3] = arr[i, 3] / 3.0
    half = cfg.w_max / 2.0
    for i in range(n):
        if abs(out[i, 1]) > half:
            out[i, 3] = out[i, 3] / 2.0
            out[i, 2] = 0.0
            out[i, 1] = math.copysign(half, out[i, 1])
    return [CarState.from_array(r) for r in out]


def track_xy(track, p_x, p_y):
    from .track import frenet_to_global

    if not track.closed:
        p_x = np.clip(p_x, 0.0, track.length)
    return frenet_to_global(track, p_x, p_y)
