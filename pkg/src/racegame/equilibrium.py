"""Online potential maximisation, Nash regret, the potential-maximiser certificate and IBR.

The maximiser of a dynamic alpha-potential function is an approximate Nash
equilibrium: if ``Phi(x, theta*) >= max Phi - lam`` then no car gains more
than ``lam + alpha`` by deviating alone.  This module computes such
maximisers, measures how much a car could actually gain, and provides the
iterated-best-response baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import CarState
from .errors import ValidationError
from .game import RaceEnv, RaceRecord, discounted_return, race_rng, rollout, sample_theta
from .learning import Mlp, joint_input, mlp_grad, predict, state_features
from .policy import DEFAULT_THETA_BOX, THETA_NAMES, PolicyParams, box_arrays

# batch of joint parameters (B, n, 5) -> (values (B,), gradients (B, n, 5))
Objective = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class ArgmaxConfig:
    learning_rate: float = 1e-4
    max_iters: int = 200
    restarts: int = 16
    warm_start: Optional[tuple] = None
    seed: int = 0
    ego_block_only: bool = False
    # independent random points used to estimate the argmax slack
    probes: int = 256

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.max_iters < 0 or self.restarts < 0 or self.probes < 0:
            raise ValidationError("max_iters, restarts and probes must be non-negative")


@dataclass
class ArgmaxResult:
    theta: np.ndarray  # (n, 5)
    value: float
    warm_value: Optional[float]
    lam_hat: float
    iterations: int

    def policy(self, i: int) -> PolicyParams:
        return PolicyParams.from_array(self.theta[i])


def potential_objective(phi: Mlp, states: np.ndarray, track_length: float) -> Objective:
    """``theta -> Phi(x, theta)`` and its gradient at a fixed joint state."""
    sf = state_features(np.asarray(states, dtype=float), track_length)
    n_state = sf.shape[-1]

    def f(thetas: np.ndarray):
        X = joint_input(sf, thetas)
        val = predict(phi, X)
        _, _, gx = mlp_grad(phi, X, np.ones((len(X), 1)), want_input=True)
        return val, gx[:, n_state:].reshape(thetas.shape)

    return f


def maximize_potential(
    objective: Objective,
    n_cars: int,
    cfg: ArgmaxConfig = ArgmaxConfig(),
    theta_box: dict = DEFAULT_THETA_BOX,
    ego: int = 0,
    others: Optional[np.ndarray] = None,
    warm: Optional[np.ndarray] = None,
) -> ArgmaxResult:
    """Projected gradient ascent from the warm start and ``cfg.restarts`` random points.

    All starts are advanced together as one batch.  The best point seen by any
    start (including the unmoved warm start) is returned, so the reported
    value never falls below the warm start's.  With ``ego_block_only`` only
    car ``ego``'s block moves and the others stay at ``others`` (or at the
    warm start).
    """
    lo, hi = box_arrays(theta_box)
    rng = np.random.default_rng(cfg.seed)
    if warm is None and cfg.warm_start is not None:
        warm = np.asarray(cfg.warm_start, dtype=float).reshape(n_cars, 5)
    base = None
    if cfg.ego_block_only:
        base = others if others is not None else warm
        if base is None:
            raise ValidationError("ego_block_only needs the other cars' parameters")
        base = np.clip(np.asarray(base, dtype=float).reshape(n_cars, 5), lo, hi)
    starts = []
    if warm is not None:
        starts.append(np.clip(np.asarray(warm, dtype=float).reshape(n_cars, 5), lo, hi))
    for _ in range(cfg.restarts):
        starts.append(rng.uniform(lo, hi, size=(n_cars, 5)))
    if not starts:
        starts.append(0.5 * (lo + hi) * np.ones((n_cars, 1)))
    Th = np.array(starts)
    mask = np.ones((n_cars, 5))
    if base is not None:
        mask[:] = 0.0
        mask[ego] = 1.0
        Th = Th * mask + base * (1.0 - mask)
    val, grad = objective(Th)
    warm_value = float(val[0]) if warm is not None else None
    best_val = val.copy()
    best_th = Th.copy()
    iters = 0
    for it in range(cfg.max_iters):
        iters = it + 1
        Th = np.clip(Th + cfg.learning_rate * grad * mask, lo, hi)
        val, grad = objective(Th)
        better = val > best_val
        best_val = np.where(better, val, best_val)
        best_th[better] = Th[better]
    k = int(np.argmax(best_val))
    theta = best_th[k]
    value = float(best_val[k])
    lam_hat = 0.0
    if cfg.probes:
        P = rng.uniform(lo, hi, size=(cfg.probes, n_cars, 5))
        if base is not None:
            P = P * mask + base * (1.0 - mask)
        pv, _ = objective(P)
        lam_hat = max(0.0, float(pv.max()) - value)
    return ArgmaxResult(theta=theta, value=value, warm_value=warm_value, lam_hat=lam_hat, iterations=iters)


# --------------------------------------------------------------------------- regret


@dataclass
class RegretReport:
    state_id: int
    regret: float
    regret_rel: float
    n_candidates: int
    best_theta: np.ndarray
    value_at_star: float


def candidate_thetas(theta_star_i: np.ndarray, n: int, theta_box: dict, rng: np.random.Generator,
                     include_star: bool = True) -> np.ndarray:
    """Random deviations drawn uniformly from the box (optionally with ``theta_star_i`` first)."""
    lo, hi = box_arrays(theta_box)
    c = rng.uniform(lo, hi, size=(n, 5))
    if include_star:
        c = np.vstack([np.asarray(theta_star_i, dtype=float)[None], c])
    return c


def nash_regret(
    value_of: Callable[[np.ndarray], float],
    theta_star: np.ndarray,
    i: int,
    candidates: np.ndarray,
    value_range: float,
    state_id: int = 0,
) -> RegretReport:
    """Best unilateral improvement of car ``i`` over ``candidates`` against ``theta_star``.

    ``value_of`` maps a joint parameter array ``(n, 5)`` to car ``i``'s value;
    it is a value network in ``value-net`` mode and a truncated rollout in
    ``rollout`` mode (see :func:`value_net_evaluator`, :func:`rollout_evaluator`).
    """
    theta_star = np.asarray(theta_star, dtype=float)
    v_star = float(value_of(theta_star))
    best = v_star
    best_theta = theta_star[i].copy()
    found = False
    for c in candidates:
        th = theta_star.copy()
        th[i] = c
        v = float(value_of(th))
        if not found or v > best:
            best, best_theta, found = v, np.asarray(c, dtype=float).copy(), True
    regret = best - v_star if found else 0.0
    rel = regret / value_range if value_range > 0 else float("nan")
    return RegretReport(state_id, regret, rel, len(candidates), best_theta, v_star)


def value_net_evaluator(net: Mlp, states: np.ndarray, track_length: float) -> Callable[[np.ndarray], float]:
    sf = state_features(np.asarray(states, dtype=float), track_length)
    return lambda th: float(predict(net, joint_input(sf, th))[0])


def rollout_value(env: RaceEnv, start: Sequence[CarState], thetas: np.ndarray, i: int, horizon: int,
                  gamma: Optional[float] = None) -> float:
    """Discounted return of car ``i`` over a ``horizon``-step rollout with fixed parameters."""
    th = [PolicyParams.from_array(t) for t in np.asarray(thetas, dtype=float)]
    rec = rollout(env, start, th, T=horizon)
    return discounted_return(rec.utilities[:, i], env.cfg.gamma if gamma is None else gamma)


def paired_rollout_dv(env: RaceEnv, sample, horizon: int, gamma: Optional[float] = None) -> float:
    """Audit label for a potential sample: ``V^i(x, theta) - V^i(x, theta')`` from two rollouts."""
    start = [CarState.from_array(s) for s in np.asarray(sample.x, dtype=float)]
    a = rollout_value(env, start, sample.theta, sample.i, horizon, gamma)
    b = rollout_value(env, start, sample.deviated(), sample.i, horizon, gamma)
    return a - b


def rollout_evaluator(env: RaceEnv, start: Sequence[CarState], i: int, horizon: int,
                      gamma: Optional[float] = None) -> Callable[[np.ndarray], float]:
    return lambda th: rollout_value(env, start, th, i, horizon, gamma)


# --------------------------------------------------------------------------- certificate


@dataclass
class Certificate:
    epsilon: float
    lam: float
    alpha_hat: float


def certify_maximiser(alpha_hat: float, lam: float) -> Certificate:
    """A ``lam``-approximate potential maximiser is an ``(lam + alpha_hat)``-Nash equilibrium."""
    if alpha_hat < 0 or lam < 0:
        raise ValidationError("alpha_hat and lam must be non-negative")
    return Certificate(epsilon=lam + alpha_hat, lam=lam, alpha_hat=alpha_hat)


# contract name for the same operation
certify_prop1 = certify_maximiser


@dataclass
class GridGame:
    """Finite game: ``values[i][a]`` is car ``i``'s value at joint action index tuple ``a``."""

    values: np.ndarray  # (n, G, G, ..., G)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def G(self) -> int:
        return self.values.shape[1]

    def profiles(self):
        return product(range(self.G), repeat=self.n)


def _frac(v) -> Fraction:
    return Fraction(float(v))


def grid_alpha(game: GridGame, phi: np.ndarray) -> Fraction:
    """Exact largest unilateral-deviation mismatch between ``phi`` and the values (floats read exactly)."""
    worst = Fraction(0)
    for a in game.profiles():
        for i in range(game.n):
            for b in range(game.G):
                a2 = list(a)
                a2[i] = b
                a2 = tuple(a2)
                d_phi = _frac(phi[a]) - _frac(phi[a2])
                d_v = _frac(game.values[i][a]) - _frac(game.values[i][a2])
                worst = max(worst, abs(d_phi - d_v))
    return worst


def grid_exploitability(game: GridGame, profile: tuple) -> Fraction:
    """Exact largest gain any car can get by deviating alone from ``profile``."""
    worst = Fraction(0)
    for i in range(game.n):
        base = _frac(game.values[i][profile])
        for b in range(game.G):
            a2 = list(profile)
            a2[i] = b
            worst = max(worst, _frac(game.values[i][tuple(a2)]) - base)
    return worst


def grid_argmax(phi: np.ndarray) -> tuple:
    return tuple(int(v) for v in np.unravel_index(int(np.argmax(phi)), phi.shape))


def payoff_grid(
    env: RaceEnv,
    start: Sequence[CarState],
    base: np.ndarray,
    param: str,
    grid: Sequence[float],
    T: int,
) -> GridGame:
    """Brute-force payoff table when every car picks one value of ``param`` from ``grid``."""
    n = len(start)
    col = THETA_NAMES.index(param)
    G = len(grid)
    vals = np.zeros((n,) + (G,) * n)
    for a in product(range(G), repeat=n):
        th = np.array(base, dtype=float).reshape(n, 5).copy()
        for i, k in enumerate(a):
            th[i, col] = grid[k]
        rec = rollout(env, start, [PolicyParams.from_array(t) for t in th], T=T)
        for i in range(n):
            vals[(i,) + a] = discounted_return(rec.utilities[:, i], env.cfg.gamma)
    return GridGame(vals)


# --------------------------------------------------------------------------- iterated best response


@dataclass(frozen=True)
class IbrConfig:
    rounds: int = 6
    horizon: int = 20
    # candidates evaluated per car and round (out of 3**5 = 243 grid points)
    budget: int = 8
    step_fraction: float = 0.25
    seed: int = 0


def ibr_candidates(theta_i: np.ndarray, theta_box: dict, step_fraction: float) -> np.ndarray:
    """3 values per parameter (down, same, up by a fraction of the box width), clipped to the box."""
    lo, hi = box_arrays(theta_box)
    d = step_fraction * (hi - lo)
    axes = [np.unique(np.clip([theta_i[k] - d[k], theta_i[k], theta_i[k] + d[k]], lo[k], hi[k])) for k in range(5)]
    return np.array(list(product(*axes)))


def ibr(
    env: RaceEnv,
    start: Sequence[CarState],
    theta_init: np.ndarray,
    cfg: IbrConfig = IbrConfig(),
    cars: Optional[Sequence[int]] = None,
    evaluate: Optional[Callable[[np.ndarray, int], float]] = None,
    candidates: Optional[Callable[[np.ndarray, int], np.ndarray]] = None,
) -> np.ndarray:
    """Round-robin best responses over short rollouts; returns the final joint parameters.

    Each car in turn (in index order) keeps the candidate with the highest
    ``horizon``-step return against the others' current parameters.  The
    current parameters are always among the candidates, so a car never
    switches to something it evaluates as worse.
    """
    theta = np.array(theta_init, dtype=float).copy()
    n = theta.shape[0]
    cars = list(range(n)) if cars is None else list(cars)
    rng = np.random.default_rng(cfg.seed)
    if evaluate is None:
        def evaluate(th, i):
            return rollout_value(env, start, th, i, cfg.horizon)
    for _ in range(cfg.rounds):
        for i in cars:
            cand = (candidates(theta, i) if candidates is not None
                    else ibr_candidates(theta[i], env.cfg.theta_box, cfg.step_fraction))
            current = theta[i].copy()
            others = [c for c in cand if not np.array_equal(c, current)]
            if cfg.budget is not None and len(others) > cfg.budget:
                pick = rng.choice(len(others), size=cfg.budget, replace=False)
                others = [others[k] for k in sorted(pick)]
            best_c, best_v = current, evaluate(theta, i)
            for c in others:
                th = theta.copy()
                th[i] = c
                v = evaluate(th, i)
                if v > best_v:
                    best_c, best_v = np.asarray(c, dtype=float), v
            theta[i] = best_c
    return theta


# --------------------------------------------------------------------------- races


@dataclass
class ControllerSpec:
    """How one car picks its parameters during a race."""

    kind: str  # potential | ibr | fixed | random
    theta: Optional[PolicyParams] = None
    phi: Optional[Mlp] = None
    argmax: ArgmaxConfig = field(default_factory=ArgmaxConfig)
    ibr: IbrConfig = field(default_factory=IbrConfig)

    def __post_init__(self):
        if self.kind not in ("potential", "ibr", "fixed", "random"):
            raise ValidationError(f"unknown controller kind {self.kind!r}")
        if self.kind == "fixed" and self.theta is None:
            raise ValidationError("a fixed controller needs theta")
        if self.kind == "potential" and self.phi is None:
            raise ValidationError("a potential controller needs a potential network")


def race(
    env: RaceEnv,
    specs: Sequence[ControllerSpec],
    start: Sequence[CarState],
    T: Optional[int] = None,
    seed: int = 0,
    race_id: int = 0,
    replan_every: int = 10,
) -> RaceRecord:
    """Race with per-car parameter selection; fixed and random cars reduce to :func:`game.rollout`.

    Potential cars re-solve ``argmax Phi`` every ``replan_every`` steps,
    warm-started from their previous solution, and keep their own block.
    IBR cars rerun the round-robin from the current joint parameters.
    Random cars draw once from the box with the race's own generator.
    """
    if len(specs) != len(start):
        raise ValidationError("need one controller spec per car")
    if replan_every < 1:
        raise ValidationError("replan_every must be >= 1")
    rng = race_rng(seed, race_id)
    box = env.cfg.theta_box
    lo, hi = box_arrays(box)
    thetas = []
    for s in specs:
        if s.kind == "fixed":
            thetas.append(s.theta)
        elif s.kind == "random":
            thetas.append(sample_theta(box, rng))
        else:
            thetas.append(s.theta if s.theta is not None else PolicyParams.from_array(0.5 * (lo + hi)))
    dynamic = [i for i, s in enumerate(specs) if s.kind in ("potential", "ibr")]
    if not dynamic:
        return rollout(env, start, thetas, T=T, seed=seed, race_id=race_id)
    n = len(specs)
    warm = {i: None for i in dynamic}
    L = env.track.length

    def hook(t, states, current):
        if t % replan_every:
            return None
        x = np.array([s.to_array() for s in states])
        joint = np.array([th.as_array() for th in current])
        new = list(current)
        for i in dynamic:
            s = specs[i]
            if s.kind == "potential":
                obj = potential_objective(s.phi, x, L)
                res = maximize_potential(obj, n, s.argmax, box, ego=i, others=joint, warm=warm[i])
                warm[i] = res.theta
                new[i] = PolicyParams.from_array(res.theta[i])
            else:
                prof = ibr(env, states, joint, s.ibr, cars=None)
                new[i] = PolicyParams.from_array(prof[i])
        return new

    return rollout(env, start, thetas, T=T, seed=seed, race_id=race_id, theta_hook=hook)


def region_starts(env: RaceEnv, ego_region: str, rng: np.random.Generator, ego: int = 0) -> list[CarState]:
    """Ego in ``ego_region``; the other cars fill the remaining regions, lower index further ahead."""
    from .game import sample_starts

    names = [r.name for r in env.cfg.start_regions]
    if ego_region not in names:
        raise ValidationError(f"unknown start region {ego_region!r}")
    rest = [r for r in env.cfg.start_regions if r.name != ego_region]
    rest.sort(key=lambda r: -r.p_x[1])
    regions = []
    k = 0
    for car in range(env.cfg.n_cars):
        if car == ego:
            regions.append(env.cfg.region(ego_region))
        else:
            regions.append(rest[k % len(rest)])
            k += 1
    return sample_starts(env, rng, regions)
