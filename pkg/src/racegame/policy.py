"""Parameterised racing policy: perturbed raceline, overtake/block shaping and tracking MPC.

A policy is fixed by five numbers ``(q, zeta, s1, s2, s3)``: the tracking
weight, the raceline speed scale, and three shape constants of the overtaking
and blocking adjustments added to the lateral reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .dynamics import (
    CarState,
    ControlInput,
    VehicleParams,
    euler_step,
    frenet_velocity,
    kappa_lookup,
)
from .errors import NonFiniteObjective
from .track import RaceLine, Track

THETA_NAMES = ("q", "zeta", "s1", "s2", "s3")
DEFAULT_THETA_BOX = {
    "q": (0.1, 5.0),
    "zeta": (0.6, 1.1),
    "s1": (0.0, 4.0),
    "s2": (0.0, 0.2),
    "s3": (0.0, 1.0),
}


@dataclass(frozen=True)
class PolicyParams:
    q: float
    zeta: float
    s1: float
    s2: float
    s3: float

    def __post_init__(self):
        if self.q <= 0:
            raise ValueError("q must be positive")
        if min(self.zeta, self.s1, self.s2, self.s3) < 0:
            raise ValueError("zeta, s1, s2, s3 must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.q, self.zeta, self.s1, self.s2, self.s3])

    @classmethod
    def from_array(cls, a) -> "PolicyParams":
        return cls(*(float(v) for v in a))

    def within(self, box) -> bool:
        return all(box[n][0] - 1e-12 <= getattr(self, n) <= box[n][1] + 1e-12 for n in THETA_NAMES)


def box_arrays(box) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([box[n][0] for n in THETA_NAMES], dtype=float)
    hi = np.array([box[n][1] for n in THETA_NAMES], dtype=float)
    return lo, hi


@dataclass(frozen=True)
class MpcConfig:
    K: int = 20
    dt: float = 0.1
    p_x_min: float = 4.0
    p_y_min: float = 2.0
    w_max: float = 10.0
    penalty_weight: float = 100.0
    max_iters: int = 10
    tol: float = 1e-6
    # flips the blocking adjustment so it pulls towards the opponent
    block_toward: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.penalty_weight <= 0 or self.p_x_min <= 0 or self.p_y_min <= 0:
            raise ValueError("penalties and separations must be positive")


@dataclass(frozen=True)
class ReferenceTrajectory:
    p_x_ref: np.ndarray
    p_y_ref: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.column_stack((self.p_x_ref, self.p_y_ref))


@dataclass(frozen=True)
class Opponent:
    """An opponent as seen at the start of the planning window (Frenet frame)."""

    p_x: float
    p_y: float
    v_x: float

    def predict(self, K: int, dt: float) -> np.ndarray:
        """Longitudinal positions for k = 1..K at constant speed."""
        return self.p_x + dt * self.v_x * np.arange(1, K + 1)


class TimedRaceline:
    """Raceline with a time parametrisation, queried in centreline Frenet coordinates."""

    def __init__(self, track: Track, raceline: RaceLine):
        if raceline.v_x is None:
            raise ValueError("raceline needs a velocity profile")
        self.track = track
        self.closed = track.closed
        self.p_x = track.s.copy()
        self.eta = raceline.eta.copy()
        ds = np.diff(raceline.s)
        v = raceline.v_x
        v_mid = np.maximum(0.5 * (v[:-1] + v[1:]), 1e-6)
        self.t = np.concatenate(([0.0], np.cumsum(ds / v_mid)))
        self.length = track.length
        self.period = float(self.t[-1])

    def time_at(self, p_x: float) -> float:
        if self.closed:
            lap = math.floor(p_x / self.length)
            return lap * self.period + float(np.interp(p_x - lap * self.length, self.p_x, self.t))
        return float(np.interp(p_x, self.p_x, self.t))

    def position_at(self, tau):
        """Frenet ``(p_x, p_y)`` of the raceline at (unwrapped) time ``tau``."""
        tau = np.asarray(tau, dtype=float)
        if self.closed:
            lap = np.floor(tau / self.period)
            local = tau - lap * self.period
            return np.interp(local, self.t, self.p_x) + lap * self.length, np.interp(local, self.t, self.eta)
        return np.interp(tau, self.t, self.p_x), np.interp(tau, self.t, self.eta)


@dataclass(frozen=True)
class PerturbedRaceline:
    """Anchor (index 0) plus K propagated points and the velocities used at each index."""

    p_x: np.ndarray
    p_y: np.ndarray
    v_x: np.ndarray
    v_y: np.ndarray


def perturbed_raceline(raceline: TimedRaceline, state: CarState, zeta: float, K: int, dt: float) -> PerturbedRaceline:
    """Propagate the raceline's dt-sampled velocities, scaled by ``zeta``, from the nearest raceline point."""
    tau0 = raceline.time_at(state.p_x)
    taus = tau0 + dt * np.arange(K + 2)
    px, py = raceline.position_at(taus)
    vx = zeta * np.diff(px) / dt
    vy = zeta * np.diff(py) / dt
    pert_x = np.empty(K + 1)
    pert_y = np.empty(K + 1)
    pert_x[0] = px[0]
    pert_y[0] = py[0]
    for k in range(1, K + 1):
        pert_x[k] = pert_x[k - 1] + vx[k - 1] * dt
        pert_y[k] = pert_y[k - 1] + vy[k - 1] * dt
    return PerturbedRaceline(p_x=pert_x, p_y=pert_y, v_x=vx, v_y=vy)


def _sign(v: float) -> float:
    return 1.0 if v >= 0 else -1.0


def overtake_adjustment(
    ego_p_y: float,
    ahead: Optional[Opponent],
    behind: Optional[Opponent],
    pert_p_x: np.ndarray,
    s1: float,
    s2: float,
    dt: float,
) -> np.ndarray:
    """Lateral shift away from nearby opponents, for k = 1..K.

    ``pert_p_x`` holds the perturbed longitudinal positions for k = 1..K.
    """
    K = len(pert_p_x)
    shift = np.zeros(K)
    for opp in (ahead, behind):
        if opp is None:
            continue
        gap = ego_p_y - opp.p_y
        dpx = pert_p_x - opp.predict(K, dt)
        shift += _sign(gap) * np.maximum((s1 - abs(gap)) * np.exp(-s2 * dpx**2), 0.0)
    return shift


def blocking_adjustment(
    pert_p_x: np.ndarray,
    pert_p_y: np.ndarray,
    pert_v_x: np.ndarray,
    ahead: Optional[Opponent],
    behind: Optional[Opponent],
    s2: float,
    s3: float,
    dt: float,
    toward: bool = False,
) -> np.ndarray:
    """Blocking shift for k = 1..K (all arrays indexed by k = 1..K).

    Active only while the ego is level with or ahead of an opponent and not
    faster than it.  ``toward=True`` flips the sign of the shift.
    """
    K = len(pert_p_x)
    shift = np.zeros(K)
    for opp in (behind, ahead):
        if opp is None:
            continue
        opp_px = opp.predict(K, dt)
        dpx = pert_p_x - opp_px
        gate = (pert_v_x <= opp.v_x) & (pert_p_x >= opp_px)
        h = (opp.p_y - pert_p_y) * (1.0 - np.exp(-s3 * (pert_v_x - opp.v_x))) * np.exp(-s2 * dpx**2)
        shift += np.where(gate, h, 0.0)
    return -shift if toward else shift


def neighbours(p_x: Sequence[float], ego: int) -> tuple[Optional[int], Optional[int]]:
    """Indices of the nearest car ahead and the nearest car behind (ties count as ahead for lower index)."""
    ahead = behind = None
    me = p_x[ego]
    for j, pj in enumerate(p_x):
        if j == ego:
            continue
        if pj > me or (pj == me and j < ego):
            if ahead is None or pj < p_x[ahead]:
                ahead = j
        else:
            if behind is None or pj > p_x[behind]:
                behind = j
    return ahead, behind


def opponent_view(track: Track, state: CarState) -> Opponent:
    kap = float(track.kappa_at(state.p_x))
    vx, _ = frenet_velocity(state.to_array(), kap)
    return Opponent(p_x=state.p_x, p_y=state.p_y, v_x=float(vx))


def reference_trajectory(
    raceline: TimedRaceline,
    states: Sequence[CarState],
    ego: int,
    theta: PolicyParams,
    cfg: MpcConfig,
) -> ReferenceTrajectory:
    """Perturbed raceline plus overtaking and blocking shifts, clipped to the half-width."""
    track = raceline.track
    me = states[ego]
    pert = perturbed_raceline(raceline, me, theta.zeta, cfg.K, cfg.dt)
    ia, ib = neighbours([s.p_x for s in states], ego)
    ahead = opponent_view(track, states[ia]) if ia is not None else None
    behind = opponent_view(track, states[ib]) if ib is not None else None
    px = pert.p_x[1:]
    py = pert.p_y[1:]
    ot = overtake_adjustment(me.p_y, ahead, behind, px, theta.s1, theta.s2, cfg.dt)
    bl = blocking_adjustment(px, py, pert.v_x[1 : cfg.K + 1], ahead, behind, theta.s2, theta.s3, cfg.dt,
                             toward=cfg.block_toward)
    half = cfg.w_max / 2.0
    return ReferenceTrajectory(p_x_ref=px.copy(), p_y_ref=np.clip(py + ot + bl, -half, half))


# --------------------------------------------------------------------------- MPC kernels


@numba.njit(cache=True)
def _project(U, u_prev, bounds):
    d_min, d_max, de_min, de_max, rate_min, rate_max = bounds[0], bounds[1], bounds[2], bounds[3], bounds[4], bounds[5]
    prev = min(max(u_prev[1], de_min), de_max)
    for k in range(U.shape[0]):
        U[k, 0] = min(max(U[k, 0], d_min), d_max)
        lo = max(de_min, prev + rate_min)
        hi = min(de_max, prev + rate_max)
        U[k, 1] = min(max(U[k, 1], lo), hi)
        prev = U[k, 1]


@numba.njit(cache=True)
def _rollout(x0, U, p, s, kap, length, closed, dt, X):
    X[0, :] = x0
    for k in range(U.shape[0]):
        kk = kappa_lookup(X[k, 0], s, kap, length, closed)
        if not euler_step(X[k], U[k, 0], U[k, 1], p, kk, dt, X[k + 1]):
            return False
    for k in range(X.shape[0]):
        for c in range(6):
            if not math.isfinite(X[k, c]):
                return False
    return True


@numba.njit(cache=True)
def _gap(a, b, length, closed):
    d = a - b
    if closed:
        d = d - length * math.floor(d / length + 0.5)
    return d


@numba.njit(cache=True)
def _penalty(X, opp, w_max, px_min, py_min, pen, length, closed):
    """Penalty value and max constraint violation (m)."""
    K = X.shape[0] - 1
    half = 0.5 * w_max
    f = 0.0
    viol = 0.0
    for k in range(1, K + 1):
        o = abs(X[k, 1]) - half
        if o > 0.0:
            f += pen * o * o
            viol = max(viol, o)
        for j in range(opp.shape[0]):
            hy = py_min - abs(X[k, 1] - opp[j, k - 1, 1])
            hx = px_min - abs(_gap(X[k, 0], opp[j, k - 1, 0], length, closed))
            if hy > 0.0 and hx > 0.0:
                f += pen * (hy * hx) ** 2
                viol = max(viol, min(hy, hx))
    return f, viol


@numba.njit(cache=True)
def _objective(x0, U, ref, opp, q, p, s, kap, length, closed, dt, w_max, px_min, py_min, pen, X):
    if not _rollout(x0, U, p, s, kap, length, closed, dt, X):
        return np.inf
    K = U.shape[0]
    f = 0.0
    for k in range(1, K + 1):
        ex = X[k, 0] - ref[k - 1, 0]
        ey = X[k, 1] - ref[k - 1, 1]
        f += q * (ex * ex + ey * ey)
    for k in range(1, K):
        a = U[k, 0] - U[k - 1, 0]
        b = U[k, 1] - U[k - 1, 1]
        f += a * a + b * b
    f += _penalty(X, opp, w_max, px_min, py_min, pen, length, closed)[0]
    if not math.isfinite(f):
        return np.inf
    return f


@numba.njit(cache=True)
def _normal_equations(x0, U, ref, opp, q, p, s, kap, length, closed, dt, w_max, px_min, py_min, pen, X):
    """Gauss-Newton ``H = J^T J`` and ``g = J^T r`` of the least-squares objective."""
    K = U.shape[0]
    n = 2 * K
    H = np.zeros((n, n))
    g = np.zeros(n)
    S = np.zeros((6, n))
    S_next = np.zeros((6, n))
    A = np.zeros((6, 6))
    B = np.zeros((6, 2))
    base = np.empty(6)
    pert = np.empty(6)
    xp = np.empty(6)
    row = np.zeros(n)
    sq = math.sqrt(q)
    sw = math.sqrt(pen)
    half = 0.5 * w_max
    for k in range(K):
        kk = kappa_lookup(X[k, 0], s, kap, length, closed)
        euler_step(X[k], U[k, 0], U[k, 1], p, kk, dt, base)
        for c in range(6):
            h = 1e-6 * max(1.0, abs(X[k, c]))
            for m in range(6):
                xp[m] = X[k, m]
            xp[c] += h
            kp = kappa_lookup(xp[0], s, kap, length, closed)
            euler_step(xp, U[k, 0], U[k, 1], p, kp, dt, pert)
            for m in range(6):
                A[m, c] = (pert[m] - base[m]) / h
        for c in range(2):
            h = 1e-6 * max(1.0, abs(U[k, c]))
            if c == 0:
                euler_step(X[k], U[k, 0] + h, U[k, 1], p, kk, dt, pert)
            else:
                euler_step(X[k], U[k, 0], U[k, 1] + h, p, kk, dt, pert)
            for m in range(6):
                B[m, c] = (pert[m] - base[m]) / h
        ncol = 2 * k
        for m in range(6):
            for c in range(ncol):
                acc = 0.0
                for l in range(6):
                    acc += A[m, l] * S[l, c]
                S_next[m, c] = acc
            S_next[m, ncol] = B[m, 0]
            S_next[m, ncol + 1] = B[m, 1]
        for m in range(6):
            for c in range(ncol + 2):
                S[m, c] = S_next[m, c]
        last = ncol + 2
        # tracking residuals at step k+1
        for axis in range(2):
            r = sq * (X[k + 1, axis] - ref[k, axis])
            for c in range(last):
                row[c] = sq * S[axis, c]
            _accumulate(H, g, row, r, last)
        o = abs(X[k + 1, 1]) - half
        if o > 0.0:
            sgn = 1.0 if X[k + 1, 1] > 0 else -1.0
            for c in range(last):
                row[c] = sw * sgn * S[1, c]
            _accumulate(H, g, row, sw * o, last)
        for j in range(opp.shape[0]):
            dy = X[k + 1, 1] - opp[j, k, 1]
            dx = _gap(X[k + 1, 0], opp[j, k, 0], length, closed)
            hy = py_min - abs(dy)
            hx = px_min - abs(dx)
            if hy > 0.0 and hx > 0.0:
                sy = 1.0 if dy >= 0 else -1.0
                sx = 1.0 if dx >= 0 else -1.0
                for c in range(last):
                    row[c] = sw * (-sy * S[1, c] * hx - sx * S[0, c] * hy)
                _accumulate(H, g, row, sw * hy * hx, last)
    # control-increment residuals (R = I)
    for k in range(1, K):
        for c in range(2):
            i1 = 2 * k + c
            i0 = 2 * (k - 1) + c
            r = U[k, c] - U[k - 1, c]
            H[i1, i1] += 1.0
            H[i0, i0] += 1.0
            H[i1, i0] -= 1.0
            H[i0, i1] -= 1.0
            g[i1] += r
            g[i0] -= r
    return H, g


@numba.njit(cache=True)
def _accumulate(H, g, row, r, last):
    for a in range(last):
        ra = row[a]
        if ra == 0.0:
            continue
        g[a] += ra * r
        for b in range(last):
            H[a, b] += ra * row[b]


@numba.njit(cache=True)
def _freeze_active(H, g, U, u_prev, bounds):
    """Pin controls that sit on a bound and whose descent direction leaves the box."""
    K = U.shape[0]
    prev = min(max(u_prev[1], bounds[2]), bounds[3])
    for k in range(K):
        lo_d, hi_d = bounds[0], bounds[1]
        lo_s = max(bounds[2], prev + bounds[4])
        hi_s = min(bounds[3], prev + bounds[5])
        prev = U[k, 1]
        for c in range(2):
            i = 2 * k + c
            lo = lo_d if c == 0 else lo_s
            hi = hi_d if c == 0 else hi_s
            if (U[k, c] <= lo + 1e-12 and g[i] > 0.0) or (U[k, c] >= hi - 1e-12 and g[i] < 0.0):
                for j in range(2 * K):
                    H[i, j] = 0.0
                    H[j, i] = 0.0
                H[i, i] = 1.0
                g[i] = 0.0


@numba.njit(cache=True)
def _lm_solve(x0, U0, u_prev, bounds, ref, opp, q, p, s, kap, length, closed, dt, w_max, px_min, py_min, pen,
              max_iters, tol):
    K = U0.shape[0]
    U = U0.copy()
    _project(U, u_prev, bounds)
    X = np.empty((K + 1, 6))
    Xt = np.empty((K + 1, 6))
    f = _objective(x0, U, ref, opp, q, p, s, kap, length, closed, dt, w_max, px_min, py_min, pen, X)
    f_start = f
    if not math.isfinite(f):
        return U, X, f, f_start, 0
    lam = 1e-3
    iters = 0
    for it in range(max_iters):
        iters = it + 1
        H, g = _normal_equations(x0, U, ref, opp, q, p, s, kap, length, closed, dt, w_max, px_min, py_min, pen, X)
        _freeze_active(H, g, U, u_prev, bounds)
        improved = False
        f_old = f
        for attempt in range(12):
            M = H.copy()
            for i in range(2 * K):
                M[i, i] += lam * (H[i, i] + 1e-9)
            step = np.linalg.solve(M, -g)
            Ut = U.copy()
            for k in range(K):
                Ut[k, 0] += step[2 * k]
                Ut[k, 1] += step[2 * k + 1]
            _project(Ut, u_prev, bounds)
            ft = _objective(x0, Ut, ref, opp, q, p, s, kap, length, closed, dt, w_max, px_min, py_min, pen, Xt)
            if ft < f:
                U = Ut
                f = ft
                for a in range(K + 1):
                    for b in range(6):
                        X[a, b] = Xt[a, b]
                lam = max(lam / 3.0, 1e-9)
                improved = True
                break
            lam *= 6.0
        if not improved:
            # projected gradient arc search when every damped step fails
            gn = 0.0
            for i in range(2 * K):
                gn += g[i] * g[i]
            t = 1.0 / math.sqrt(gn) if gn > 0.0 else 0.0
            for attempt in range(20):
                Ut = U.copy()
                for k in range(K):
                    Ut[k, 0] -= t * g[2 * k]
                    Ut[k, 1] -= t * g[2 * k + 1]
                _project(Ut, u_prev, bounds)
                ft = _objective(x0, Ut, ref, opp, q, p, s, kap, length, closed, dt, w_max, px_min, py_min, pen, Xt)
                if ft < f:
                    U = Ut
                    f = ft
                    for a in range(K + 1):
                        for b in range(6):
                            X[a, b] = Xt[a, b]
                    improved = True
                    break
                t *= 0.3
        if not improved or f_old - f <= tol * (1.0 + f_old):
            break
    return U, X, f, f_start, iters


@dataclass
class MpcResult:
    u0: ControlInput
    controls: np.ndarray
    states: np.ndarray
    objective: float
    start_objective: float
    residual: float
    iterations: int


def mpc_solve(
    state: CarState,
    ref: ReferenceTrajectory,
    opponents: Optional[np.ndarray],
    q: float,
    vp: VehicleParams,
    cfg: MpcConfig,
    track: Track,
    warm: Optional[np.ndarray] = None,
    u_prev: Optional[ControlInput] = None,
) -> MpcResult:
    """Tracking MPC by projected Levenberg-Marquardt single shooting.

    ``opponents`` holds predicted ``(p_x, p_y)`` for k = 1..K, shape
    ``(n_opp, K, 2)``.  Without ``warm`` the search starts from repeating
    ``u_prev`` (zero control increments).  Steps are only accepted when the
    objective decreases, so the result never does worse than the (projected)
    starting sequence.
    """
    K = cfg.K
    refa = np.ascontiguousarray(ref.as_array(), dtype=float)
    if refa.shape != (K, 2):
        raise ValueError(f"reference must have {K} points")
    up = np.zeros(2) if u_prev is None else np.asarray(u_prev.to_array(), dtype=float)
    if warm is None:
        U0 = np.tile(up, (K, 1))
    else:
        U0 = np.array(warm, dtype=float)
        if U0.shape != (K, 2):
            raise ValueError(f"warm start must be ({K}, 2)")
    opp = np.zeros((0, K, 2)) if opponents is None or len(opponents) == 0 else np.ascontiguousarray(opponents, dtype=float)
    U, X, f, f0, iters = _lm_solve(
        state.to_array(), U0, up, vp.control_bounds(), refa, opp, float(q), vp.as_array(),
        track.s, track.kappa, track.length, track.closed, cfg.dt, cfg.w_max, cfg.p_x_min, cfg.p_y_min,
        cfg.penalty_weight, cfg.max_iters, cfg.tol,
    )
    if not math.isfinite(f):
        raise NonFiniteObjective("MPC rollout diverged")
    _, viol = _penalty(X, opp, cfg.w_max, cfg.p_x_min, cfg.p_y_min, cfg.penalty_weight, track.length, track.closed)
    return MpcResult(
        u0=ControlInput(float(U[0, 0]), float(U[0, 1])),
        controls=U,
        states=X,
        objective=float(f),
        start_objective=float(f0),
        residual=float(viol),
        iterations=int(iters),
    )


def predict_opponents(track: Track, states: Sequence[CarState], ego: int, K: int, dt: float) -> np.ndarray:
    """Constant-speed, zero-lateral-velocity predictions of every other car."""
    preds = []
    for j, st in enumerate(states):
        if j == ego:
            continue
        o = opponent_view(track, st)
        preds.append(np.column_stack((o.predict(K, dt), np.full(K, o.p_y))))
    if not preds:
        return np.zeros((0, K, 2))
    return np.array(preds)


@dataclass
class Controller:
    """Receding-horizon controller of one car; owns its warm-start cache."""

    raceline: TimedRaceline
    vp: VehicleParams
    cfg: MpcConfig
    theta: PolicyParams
    warm: Optional[np.ndarray] = None
    last_u: ControlInput = field(default_factory=ControlInput)
    last_result: Optional[MpcResult] = None
    fallbacks: int = 0

    def act(self, states: Sequence[CarState], ego: int) -> ControlInput:
        return policy_act(states, ego, self)

    def reset(self) -> None:
        self.warm = None
        self.last_u = ControlInput()
        self.last_result = None


def policy_act(states: Sequence[CarState], ego: int, ctl: Controller) -> ControlInput:
    """Reference shaping followed by the MPC solve; returns the first planned control."""
    cfg = ctl.cfg
    track = ctl.raceline.track
    ref = reference_trajectory(ctl.raceline, states, ego, ctl.theta, cfg)
    opp = predict_opponents(track, states, ego, cfg.K, cfg.dt)
    try:
        res = mpc_solve(states[ego], ref, opp, ctl.theta.q, ctl.vp, cfg, track, warm=ctl.warm, u_prev=ctl.last_u)
    except NonFiniteObjective:
        ctl.fallbacks += 1
        ctl.warm = None
        ctl.last_result = None
        u = ControlInput(ctl.vp.d_min, 0.0)
        ctl.last_u = u
        return u
    ctl.last_result = res
    ctl.warm = np.vstack((res.controls[1:], res.controls[-1:]))
    ctl.last_u = res.u0
    return res.u0
