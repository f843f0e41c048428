"""Race engine: joint rollouts, relative-progress utility, returns and datasets.

Longitudinal positions are kept unwrapped in the car states (the dynamics
never fold ``p_x`` back into ``[0, lap)``), so ``p_x`` is a lap-aware
cumulative arc length and the utility never jumps at the start line.
"""

from __future__ import annotations

import hashlib
import json
import math
import subprocess
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import (
    CarState,
    ControlInput,
    InteractionConfig,
    VehicleParams,
    apply_interaction_rules,
    step,
    track_xy,
)
from .errors import EmptyDataset, SingularFrenet, StartSamplingFailed, ValidationError
from .policy import (
    DEFAULT_THETA_BOX,
    THETA_NAMES,
    Controller,
    MpcConfig,
    PolicyParams,
    TimedRaceline,
    box_arrays,
)
from .track import Track, VelocityProfileConfig, compute_raceline, profile_library

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class StartRegion:
    """Axis-aligned box in Frenet coordinates from which starts are drawn."""

    name: str
    p_x: tuple[float, float]
    p_y: tuple[float, float]

    def __post_init__(self):
        if not (self.p_x[0] <= self.p_x[1] and self.p_y[0] <= self.p_y[1]):
            raise ValidationError(f"start region {self.name}: empty box")

    def sample(self, rng: np.random.Generator) -> tuple[float, float]:
        return float(rng.uniform(*self.p_x)), float(rng.uniform(*self.p_y))


# R1 is furthest ahead on the track, then R2, then R3
DEFAULT_START_REGIONS = (
    StartRegion("R1", (36.0, 46.0), (-3.0, 3.0)),
    StartRegion("R2", (22.0, 32.0), (-3.0, 3.0)),
    StartRegion("R3", (8.0, 18.0), (-3.0, 3.0)),
)


@dataclass(frozen=True)
class GameConfig:
    n_cars: int = 3
    gamma: float = 0.99
    dt: float = 0.1
    T: int = 500
    theta_box: dict = field(default_factory=lambda: dict(DEFAULT_THETA_BOX))
    unsafe_dist: float = 1.0
    start_regions: tuple = DEFAULT_START_REGIONS
    # friction used to pick the raceline speed profile
    mu: float = 0.8
    w_veh: float = 2.0
    start_speed: float = 10.0
    horizon: int = 20
    penalty_weight: float = 100.0
    mpc_iters: int = 10

    def __post_init__(self):
        if self.n_cars < 2:
            raise ValidationError("n_cars must be >= 2")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError("gamma must lie in [0, 1)")
        if self.T < 1:
            raise ValidationError("T must be >= 1")
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if self.unsafe_dist <= 0:
            raise ValidationError("unsafe_dist must be positive")
        if not self.start_regions:
            raise ValidationError("need at least one start region")
        for name in THETA_NAMES:
            lo, hi = self.theta_box.get(name, (None, None))
            if lo is None or not lo <= hi:
                raise ValidationError(f"theta_box[{name!r}] must be a (lo, hi) pair with lo <= hi")
        if self.theta_box["q"][0] <= 0:
            raise ValidationError("theta_box q must be positive")
        if min(self.theta_box[n][0] for n in THETA_NAMES[1:]) < 0:
            raise ValidationError("theta_box zeta, s1, s2, s3 must be non-negative")

    def mpc_config(self, w_max: float) -> MpcConfig:
        return MpcConfig(K=self.horizon, dt=self.dt, w_max=w_max, penalty_weight=self.penalty_weight,
                         max_iters=self.mpc_iters)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta_box"] = {n: list(self.theta_box[n]) for n in THETA_NAMES}
        d["start_regions"] = [{"name": r.name, "p_x": list(r.p_x), "p_y": list(r.p_y)} for r in self.start_regions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GameConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown game config keys: {sorted(unknown)}")
        d = dict(d)
        if "theta_box" in d:
            d["theta_box"] = {k: tuple(v) for k, v in d["theta_box"].items()}
        if "start_regions" in d:
            d["start_regions"] = tuple(
                StartRegion(r["name"], tuple(r["p_x"]), tuple(r["p_y"])) for r in d["start_regions"]
            )
        return cls(**d)

    def region(self, name: str) -> StartRegion:
        for r in self.start_regions:
            if r.name == name:
                return r
        raise ValidationError(f"unknown start region {name!r}")


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class RaceEnv:
    """Everything a rollout needs besides the policies: track, raceline, vehicle and rules."""

    def __init__(self, track: Track, vp: VehicleParams, cfg: GameConfig, raceline: Optional[TimedRaceline] = None):
        self.track = track
        self.vp = vp
        self.cfg = cfg
        if raceline is None:
            raceline = timed_raceline(track, cfg.w_veh, cfg.mu)
        self.raceline = raceline
        self.mpc = cfg.mpc_config(track.w_max)
        self.rules = InteractionConfig(unsafe_dist=cfg.unsafe_dist, w_max=track.w_max)

    def with_config(self, cfg: GameConfig) -> "RaceEnv":
        same_line = cfg.mu == self.cfg.mu and cfg.w_veh == self.cfg.w_veh
        return RaceEnv(self.track, self.vp, cfg, self.raceline if same_line else None)

    def controllers(self, thetas: Sequence[PolicyParams]) -> list[Controller]:
        return [Controller(self.raceline, self.vp, self.mpc, th) for th in thetas]


def timed_raceline(track: Track, w_veh: float, mu: float) -> TimedRaceline:
    rl = _raceline_geometry(track, w_veh)
    cfg = VelocityProfileConfig(w_veh=w_veh, mu_min=min(mu, VelocityProfileConfig.mu_min),
                                mu_max=max(mu, VelocityProfileConfig.mu_max))
    v, a = profile_library(rl, cfg).lookup(mu)
    return TimedRaceline(track, rl.with_profile(v, a))


_RACELINE_CACHE: dict = {}


def _raceline_geometry(track: Track, w_veh: float):
    key = (id(track), w_veh)
    hit = _RACELINE_CACHE.get(key)
    if hit is not None and hit[0] is track:
        return hit[1]
    rl = compute_raceline(track, w_veh)
    _RACELINE_CACHE[key] = (track, rl)
    return rl


# --------------------------------------------------------------------------- utility and returns


def lead(p_x: Sequence[float], i: int) -> float:
    """How far car ``i`` is ahead of the best of the others."""
    return p_x[i] - max(p for j, p in enumerate(p_x) if j != i)


def utility(prev: Sequence[CarState], nxt: Sequence[CarState], i: int) -> float:
    """Change in car ``i``'s lead over one step."""
    if len(prev) < 2 or len(nxt) != len(prev):
        raise ValidationError("utility needs matching joint states with at least two cars")
    a = [s.p_x for s in prev]
    b = [s.p_x for s in nxt]
    return lead(b, i) - lead(a, i)


def discounted_return(utilities: Sequence[float], gamma: float) -> float:
    total = 0.0
    for u in reversed(list(utilities)):
        total = u + gamma * total
    return total


def returns_to_go(utilities: np.ndarray, gamma: float, horizon: Optional[int] = None) -> np.ndarray:
    """Discounted return from every step to the end (or over the next ``horizon`` steps).

    ``utilities`` has time on axis 0; any trailing axes (cars) are carried through.
    """
    u = np.asarray(utilities, dtype=float)
    T = u.shape[0]
    out = np.zeros_like(u)
    if horizon is None:
        acc = np.zeros(u.shape[1:])
        for t in range(T - 1, -1, -1):
            acc = u[t] + gamma * acc
            out[t] = acc
        return out
    weights = gamma ** np.arange(horizon)
    for t in range(T):
        seg = u[t : t + horizon]
        out[t] = np.tensordot(weights[: len(seg)], seg, axes=(0, 0))
    return out


# --------------------------------------------------------------------------- rollout


@dataclass
class RaceRecord:
    race_id: int
    seed: int
    theta: np.ndarray  # (n_cars, 5) parameters at the start of the race
    states: np.ndarray  # (T+1, n_cars, 6)
    controls: np.ndarray  # (T, n_cars, 2)
    utilities: np.ndarray  # (T, n_cars)
    winner: int
    theta_trace: Optional[np.ndarray] = None  # (T, n_cars, 5) when parameters change during the race
    fallbacks: int = 0

    @property
    def T(self) -> int:
        return self.controls.shape[0]

    @property
    def n_cars(self) -> int:
        return self.states.shape[1]

    def frame(self, t: int) -> list[CarState]:
        return [CarState.from_array(r) for r in self.states[t]]

    def to_json(self) -> dict:
        d = {
            "schema": SCHEMA_VERSION,
            "race_id": int(self.race_id),
            "seed": int(self.seed),
            "theta": self.theta.tolist(),
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "utilities": self.utilities.tolist(),
            "winner": int(self.winner),
            "fallbacks": int(self.fallbacks),
        }
        if self.theta_trace is not None:
            d["theta_trace"] = self.theta_trace.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RaceRecord":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported race record schema {d.get('schema')!r}")
        n = len(d["theta"])
        trace = d.get("theta_trace")
        return cls(
            race_id=d["race_id"],
            seed=d["seed"],
            theta=np.array(d["theta"], dtype=float).reshape(n, 5),
            states=np.array(d["states"], dtype=float).reshape(-1, n, 6),
            controls=np.array(d["controls"], dtype=float).reshape(-1, n, 2),
            utilities=np.array(d["utilities"], dtype=float).reshape(-1, n),
            winner=d["winner"],
            theta_trace=None if trace is None else np.array(trace, dtype=float).reshape(-1, n, 5),
            fallbacks=d.get("fallbacks", 0),
        )


# called before each step with (t, states, thetas); may return replacement parameters
ThetaHook = Callable[[int, list, list], Optional[Sequence[PolicyParams]]]


def advance(env: RaceEnv, states: Sequence[CarState], controls: Sequence[ControlInput]) -> list[CarState]:
    """Dynamics step for every car followed by the interaction rules."""
    nxt = []
    for st, u in zip(states, controls):
        kap = float(env.track.kappa_at(st.p_x))
        try:
            nxt.append(step(st, u, env.vp, kap, env.cfg.dt))
        except SingularFrenet:
            nxt.append(st)
    return apply_interaction_rules(nxt, env.rules, env.track)


def rollout(
    env: RaceEnv,
    start: Sequence[CarState],
    thetas: Sequence[PolicyParams],
    T: Optional[int] = None,
    seed: int = 0,
    race_id: int = 0,
    theta_hook: Optional[ThetaHook] = None,
    controllers: Optional[list[Controller]] = None,
) -> RaceRecord:
    """Simulate one race; the dynamics are deterministic so ``seed`` is only recorded."""
    T = env.cfg.T if T is None else T
    n = len(start)
    if len(thetas) != n:
        raise ValidationError("need one parameter vector per car")
    thetas = list(thetas)
    ctls = controllers if controllers is not None else env.controllers(thetas)
    states = [CarState.from_array(s.to_array()) for s in start]
    X = np.empty((T + 1, n, 6))
    U = np.empty((T, n, 2))
    R = np.empty((T, n))
    trace = np.empty((T, n, 5)) if theta_hook is not None else None
    X[0] = [s.to_array() for s in states]
    theta0 = np.array([th.as_array() for th in thetas])
    for t in range(T):
        if theta_hook is not None:
            new = theta_hook(t, states, thetas)
            if new is not None:
                thetas = list(new)
                for c, th in zip(ctls, thetas):
                    c.theta = th
            trace[t] = [th.as_array() for th in thetas]
        controls = [c.act(states, i) for i, c in enumerate(ctls)]
        nxt = advance(env, states, controls)
        p0 = [s.p_x for s in states]
        p1 = [s.p_x for s in nxt]
        R[t] = [lead(p1, i) - lead(p0, i) for i in range(n)]
        U[t] = [u.to_array() for u in controls]
        X[t + 1] = [s.to_array() for s in nxt]
        states = nxt
    winner = int(np.argmax(X[-1, :, 0]))
    return RaceRecord(race_id=race_id, seed=seed, theta=theta0, states=X, controls=U, utilities=R,
                      winner=winner, theta_trace=trace, fallbacks=sum(c.fallbacks for c in ctls))


# --------------------------------------------------------------------------- sampling


def race_rng(seed: int, race_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(race_id)])


def sample_theta(box: dict, rng: np.random.Generator) -> PolicyParams:
    lo, hi = box_arrays(box)
    return PolicyParams.from_array(rng.uniform(lo, hi))


def start_state(p_x: float, p_y: float, speed: float) -> CarState:
    return CarState(p_x=p_x, p_y=p_y, phi=0.0, v_tilde_x=speed, v_tilde_y=0.0, omega=0.0)


def sample_starts(
    env: RaceEnv,
    rng: np.random.Generator,
    regions: Optional[Sequence[StartRegion]] = None,
    max_tries: int = 200,
) -> list[CarState]:
    """Draw non-overlapping starts; car ``k`` uses ``regions[k]`` or a uniformly chosen region."""
    cfg = env.cfg
    n = cfg.n_cars
    half = env.track.w_max / 2.0
    for _ in range(max_tries):
        pts = []
        for k in range(n):
            reg = regions[k] if regions is not None else cfg.start_regions[int(rng.integers(len(cfg.start_regions)))]
            px, py = reg.sample(rng)
            pts.append((px, float(np.clip(py, -half, half))))
        px = np.array([p[0] for p in pts])
        py = np.array([p[1] for p in pts])
        gx, gy = track_xy(env.track, px, py)
        ok = True
        for i in range(n):
            for j in range(i + 1, n):
                if math.hypot(gx[i] - gx[j], gy[i] - gy[j]) <= cfg.unsafe_dist:
                    ok = False
        if ok:
            return [start_state(x, y, cfg.start_speed) for x, y in pts]
    raise StartSamplingFailed(f"no overlap-free start after {max_tries} tries")


def random_race(env: RaceEnv, seed: int, race_id: int) -> RaceRecord:
    rng = race_rng(seed, race_id)
    thetas = [sample_theta(env.cfg.theta_box, rng) for _ in range(env.cfg.n_cars)]
    start = sample_starts(env, rng)
    return rollout(env, start, thetas, seed=seed, race_id=race_id)


# --------------------------------------------------------------------------- datasets


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _race_worker(args):
    env, seed, race_id = args
    return random_race(env, seed, race_id)


def generate_races(env: RaceEnv, n_races: int, seed: int, workers: int = 1) -> list[RaceRecord]:
    if n_races < 1:
        raise ValidationError("n_races must be >= 1")
    jobs = [(env, seed, k) for k in range(n_races)]
    if workers <= 1:
        return [_race_worker(j) for j in jobs]
    from multiprocessing import get_context

    with get_context("spawn").Pool(workers) as pool:
        return pool.map(_race_worker, jobs)


def dataset_metadata(env: RaceEnv, races: Sequence[RaceRecord], seed: int, extra: Optional[dict] = None,
                     horizon: Optional[int] = None) -> dict:
    """Header record; ``value_range`` spans the returns-to-go (windowed to ``horizon`` steps if given)."""
    cfg = env.cfg
    r_max = max(float(np.max(np.abs(r.utilities))) if r.T else 0.0 for r in races)
    rtg = [returns_to_go(r.utilities, cfg.gamma, horizon) for r in races if r.T]
    lo = min(float(v.min()) for v in rtg) if rtg else 0.0
    hi = max(float(v.max()) for v in rtg) if rtg else 0.0
    meta = {
        "schema": SCHEMA_VERSION,
        "kind": "metadata",
        "game": cfg.to_dict(),
        "vehicle": asdict(env.vp),
        "seed": int(seed),
        "n_races": len(races),
        "git": git_describe(),
        "r_max": r_max,
        "tail_bound": cfg.gamma ** cfg.T * r_max / (1.0 - cfg.gamma),
        "value_range": [lo, hi],
        "value_horizon": horizon,
    }
    if extra:
        meta.update(extra)
    meta["config_hash"] = config_hash({"game": meta["game"], "vehicle": meta["vehicle"]})
    return meta


def write_dataset(path, meta: dict, races: Sequence[RaceRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for r in races:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_dataset(path) -> tuple[dict, list[RaceRecord]]:
    meta = None
    races = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if d.get("kind") == "metadata":
                meta = d
            else:
                races.append(RaceRecord.from_json(d))
    if meta is None:
        raise ValidationError(f"{path}: missing metadata line")
    if not races:
        raise EmptyDataset(f"{path}: no races")
    return meta, races


def generate_dataset(env: RaceEnv, n_races: int, seed: int, path=None, workers: int = 1, extra: Optional[dict] = None,
                     horizon: Optional[int] = None):
    """Simulate ``n_races`` random races and optionally write them as JSON lines."""
    races = generate_races(env, n_races, seed, workers=workers)
    meta = dataset_metadata(env, races, seed, extra, horizon)
    if path is not None:
        write_dataset(path, meta, races)
    return meta, races
