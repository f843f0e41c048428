"""Feed-forward networks in numpy, value regression and alpha-potential training.

Networks take the joint state features concatenated with every car's policy
parameters.  Inputs are standardised with statistics stored in the network
(a fixed stand-in for an input BatchNorm layer), hidden layers use ReLU and
the output layer is affine.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateRange, DimensionMismatch, EmptyDataset, EmptySamples, ValidationError
from .game import RaceRecord, returns_to_go
from .policy import box_arrays

MODEL_SCHEMA = 1
VAR_FLOOR = 1e-6
STATE_FEATURES = 8  # per car


# --------------------------------------------------------------------------- features


def state_features(states: np.ndarray, track_length: float) -> np.ndarray:
    """Per-car features of joint states ``(..., n_cars, 6)`` -> ``(..., n_cars * 8)``.

    For every car: position relative to the field mean, sin/cos of the lap
    position, then ``p_y, phi, v_tilde_x, v_tilde_y, omega``.
    """
    s = np.asarray(states, dtype=float)
    px = s[..., 0]
    rel = px - px.mean(axis=-1, keepdims=True)
    ang = 2.0 * np.pi * px / track_length
    f = np.stack([rel, np.sin(ang), np.cos(ang), s[..., 1], s[..., 2], s[..., 3], s[..., 4], s[..., 5]], axis=-1)
    return f.reshape(*f.shape[:-2], -1)


def joint_input(state_feats: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """Concatenate state features ``(B, F)`` with joint parameters ``(B, n, 5)``; a single row broadcasts."""
    sf = np.atleast_2d(np.asarray(state_feats, dtype=float))
    th = np.asarray(thetas, dtype=float)
    if th.ndim == 2:
        th = th[None]
    th = th.reshape(th.shape[0], -1)
    rows = max(len(sf), len(th))
    sf = np.broadcast_to(sf, (rows, sf.shape[1]))
    th = np.broadcast_to(th, (rows, th.shape[1]))
    return np.concatenate([sf, th], axis=1)


# --------------------------------------------------------------------------- network


@dataclass
class Mlp:
    widths: list  # [n_in, hidden..., n_out]
    weights: list  # (w_in, w_out) per layer
    biases: list
    mean: np.ndarray
    var: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValidationError("an Mlp needs at least input and output widths")
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ValidationError("one weight matrix and bias per layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.widths[k], self.widths[k + 1]) or b.shape != (self.widths[k + 1],):
                raise ValidationError(f"layer {k}: inconsistent shapes")
        self.var = np.maximum(np.asarray(self.var, dtype=float), VAR_FLOOR)
        self.mean = np.asarray(self.mean, dtype=float)

    @property
    def n_in(self) -> int:
        return self.widths[0]

    def copy(self) -> "Mlp":
        return Mlp(list(self.widths), [W.copy() for W in self.weights], [b.copy() for b in self.biases],
                   self.mean.copy(), self.var.copy(), dict(self.meta))

    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def to_json(self) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "widths": list(self.widths),
            "mean": self.mean.tolist(),
            "var": self.var.tolist(),
            "weights": [W.ravel().tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Mlp":
        if d.get("schema") != MODEL_SCHEMA:
            raise ValidationError(f"unsupported model schema {d.get('schema')!r}")
        w = d["widths"]
        weights = [np.array(W, dtype=float).reshape(w[k], w[k + 1]) for k, W in enumerate(d["weights"])]
        biases = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(list(w), weights, biases, np.array(d["mean"]), np.array(d["var"]), d.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def init_mlp(n_in: int, hidden: Sequence[int], n_out: int = 1, seed: int = 0) -> Mlp:
    """He-initialised weights, zero biases, identity normalisation."""
    rng = np.random.default_rng(seed)
    widths = [n_in, *hidden, n_out]
    weights = [rng.normal(0.0, math.sqrt(2.0 / widths[k]), size=(widths[k], widths[k + 1]))
               for k in range(len(widths) - 1)]
    biases = [np.zeros(widths[k + 1]) for k in range(len(widths) - 1)]
    return Mlp(widths, weights, biases, np.zeros(n_in), np.ones(n_in))


def fit_normalization(net: Mlp, X: np.ndarray) -> None:
    X = np.atleast_2d(X)
    _check_dim(net, X)
    net.mean = X.mean(axis=0)
    net.var = np.maximum(X.var(axis=0), VAR_FLOOR)


def _check_dim(net: Mlp, X: np.ndarray) -> None:
    if X.shape[-1] != net.n_in:
        raise DimensionMismatch(f"expected {net.n_in} input features, got {X.shape[-1]}")


def _forward(net: Mlp, X: np.ndarray):
    z = (X - net.mean) / np.sqrt(net.var)
    acts = [z]
    h = z
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W + b
        if k < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Network output; a single input vector gives a 1-d output, a batch ``(B, n_in)`` gives ``(B, n_out)``."""
    X = np.asarray(x, dtype=float)
    _check_dim(net, X)
    single = X.ndim == 1
    out = _forward(net, np.atleast_2d(X))[-1]
    return out[0] if single else out


def predict(net: Mlp, X) -> np.ndarray:
    """Scalar-output convenience: ``(B,)`` predictions."""
    return mlp_forward(net, np.atleast_2d(X))[:, 0]


def mlp_grad(net: Mlp, x, upstream, want_input: bool = False):
    """Reverse-mode gradients of ``sum(upstream * mlp_forward(net, x))``.

    Returns ``(dW, db)`` lists matching the layers, plus the gradient with
    respect to the raw input when ``want_input`` is set.
    """
    X = np.asarray(x, dtype=float)
    _check_dim(net, X)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    G = np.asarray(upstream, dtype=float).reshape(X.shape[0], net.widths[-1])
    acts = _forward(net, X)
    dW = [None] * len(net.weights)
    db = [None] * len(net.weights)
    g = G
    for k in range(len(net.weights) - 1, -1, -1):
        dW[k] = acts[k].T @ g
        db[k] = g.sum(axis=0)
        g = g @ net.weights[k].T
        if k > 0:
            g = g * (acts[k] > 0.0)
    if not want_input:
        return dW, db
    gx = g / np.sqrt(net.var)
    return dW, db, (gx[0] if single else gx)


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 2000
    batch_size: int = 256
    seed: int = 0
    gamma: float = 0.99
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError("gamma must lie in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("val_fraction must lie in [0, 1)")


class Adam:
    def __init__(self, params: list, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _flat_grads(dW, db) -> list:
    out = []
    for a, b in zip(dW, db):
        out += [a, b]
    return out


def _scale_output(net: Mlp, scale: float, offset: float) -> None:
    net.weights[-1] *= scale
    net.biases[-1] = net.biases[-1] * scale + offset


def fit_regression(
    X: np.ndarray,
    y: np.ndarray,
    hidden: Sequence[int],
    cfg: TrainConfig,
    X_val: Optional[np.ndarray] = None,
    y_val: Optional[np.ndarray] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
    early_stopping: bool = True,
) -> tuple[Mlp, dict]:
    """Minibatch Adam on mean squared error; targets are standardised during training.

    With validation data and ``early_stopping`` the weights of the epoch with
    the lowest validation loss are kept.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    net = init_mlp(X.shape[1], hidden, 1, seed=cfg.seed)
    fit_normalization(net, X)
    mu = float(y.mean())
    sd = float(y.std()) or 1.0
    t = (y - mu) / sd
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(net.params(), cfg.learning_rate)
    history = []
    n = len(X)
    has_val = X_val is not None and len(X_val) > 0
    if has_val:
        t_val = (np.asarray(y_val, dtype=float) - mu) / sd
    best = (math.inf, None, -1)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out = _forward(net, X[idx])[-1][:, 0]
            err = out - t[idx]
            total += float(err @ err)
            dW, db = mlp_grad(net, X[idx], (2.0 / len(idx)) * err[:, None])
            opt.step(_flat_grads(dW, db))
        history.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
        if has_val and early_stopping:
            v = float(np.mean((_forward(net, X_val)[-1][:, 0] - t_val) ** 2))
            if v < best[0]:
                best = (v, [p.copy() for p in net.params()], epoch)
    if best[1] is not None:
        for p, b in zip(net.params(), best[1]):
            p[...] = b
    _scale_output(net, sd, mu)
    metrics = {"train_loss": float(np.mean((predict(net, X) - y) ** 2)), "history": history,
               "best_epoch": best[2] if best[1] is not None else cfg.epochs - 1}
    if X_val is not None and len(X_val):
        pv = predict(net, X_val)
        mse = float(np.mean((pv - y_val) ** 2))
        var = float(np.var(y_val))
        metrics["val_loss"] = mse
        metrics["val_r2"] = 1.0 - mse / var if var > 0 else float("nan")
    return net, metrics


# --------------------------------------------------------------------------- value functions


@dataclass
class ValueData:
    """Flattened training pairs of one car: network inputs and return targets."""

    X: np.ndarray
    y: np.ndarray
    race_index: np.ndarray


def value_targets(race: RaceRecord, car: int, gamma: float, mode: str = "return", horizon: Optional[int] = None,
                  lam: float = 0.9, values: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Steps used and their regression targets for one race.

    ``return``: discounted return-to-go (or over ``horizon`` steps, keeping
    only steps with a full window).  ``td``: lambda-returns bootstrapped
    from ``values`` (current predictions for every frame, ``T+1`` entries).
    """
    u = race.utilities[:, car]
    T = len(u)
    if mode == "return":
        if horizon is None:
            return np.arange(T), returns_to_go(u, gamma)
        steps = np.arange(0, T - horizon + 1)
        return steps, returns_to_go(u, gamma, horizon)[steps]
    if mode == "td":
        if values is None:
            raise ValidationError("td mode needs current value predictions")
        g = np.empty(T)
        nxt = values[T]
        for t in range(T - 1, -1, -1):
            nxt = u[t] + gamma * ((1.0 - lam) * values[t + 1] + lam * nxt)
            g[t] = nxt
        return np.arange(T), g
    raise ValidationError(f"unknown value mode {mode!r}")


def race_inputs(race: RaceRecord, track_length: float, steps: Optional[np.ndarray] = None) -> np.ndarray:
    states = race.states if steps is None else race.states[steps]
    if race.theta_trace is not None:
        full = np.concatenate([race.theta_trace, race.theta_trace[-1:]], axis=0)
        th = full if steps is None else full[steps]
    else:
        th = np.repeat(race.theta[None], len(states), axis=0)
    return joint_input(state_features(states, track_length), th)


def value_dataset(races: Sequence[RaceRecord], car: int, track_length: float, gamma: float,
                  horizon: Optional[int] = None) -> ValueData:
    if not races:
        raise EmptyDataset("no races")
    Xs, ys, ids = [], [], []
    for k, r in enumerate(races):
        steps, y = value_targets(r, car, gamma, horizon=horizon)
        if len(steps) == 0:
            continue
        Xs.append(race_inputs(r, track_length, steps))
        ys.append(y)
        ids.append(np.full(len(steps), k))
    if not Xs:
        raise EmptyDataset("no usable steps (races shorter than the return window?)")
    return ValueData(np.concatenate(Xs), np.concatenate(ys), np.concatenate(ids))


def split_by_race(n_races: int, val_fraction: float, seed: int) -> np.ndarray:
    """Boolean mask of validation races."""
    rng = np.random.default_rng(seed + 7)
    n_val = int(round(val_fraction * n_races))
    if n_races > 1:
        n_val = min(max(n_val, 1 if val_fraction > 0 else 0), n_races - 1)
    else:
        n_val = 0
    mask = np.zeros(n_races, dtype=bool)
    mask[rng.permutation(n_races)[:n_val]] = True
    return mask


def train_value(
    races: Sequence[RaceRecord],
    car: int,
    track_length: float,
    hidden: Sequence[int] = (128, 128, 64),
    cfg: TrainConfig = TrainConfig(),
    mode: str = "return",
    horizon: Optional[int] = None,
    lam: float = 0.9,
    td_sweeps: int = 3,
) -> tuple[Mlp, dict]:
    """Fit ``V^car`` on returns (default) or by TD(lambda) target iteration.

    In ``td`` mode the network is refitted ``td_sweeps`` times, each time on
    lambda-returns bootstrapped from the previous fit.
    """
    if not races:
        raise EmptyDataset("no races")
    val_mask = split_by_race(len(races), cfg.val_fraction, cfg.seed)
    train = [r for r, v in zip(races, val_mask) if not v]
    val = [r for r, v in zip(races, val_mask) if v]

    def assemble(rs, net):
        Xs, ys = [], []
        for r in rs:
            if mode == "td":
                Xr = race_inputs(r, track_length)
                vals = np.zeros(len(Xr)) if net is None else predict(net, Xr)
                steps, y = value_targets(r, car, cfg.gamma, mode="td", lam=lam, values=vals)
                Xs.append(Xr[steps])
            else:
                steps, y = value_targets(r, car, cfg.gamma, horizon=horizon)
                if len(steps) == 0:
                    continue
                Xs.append(race_inputs(r, track_length, steps))
            ys.append(y)
        if not Xs:
            return np.zeros((0, 0)), np.zeros(0)
        return np.concatenate(Xs), np.concatenate(ys)

    net = None
    sweeps = td_sweeps if mode == "td" else 1
    for _ in range(sweeps):
        X, y = assemble(train, net)
        if len(y) == 0:
            raise EmptyDataset("no usable training steps")
        Xv, yv = assemble(val, net) if val else (None, None)
        net, metrics = fit_regression(X, y, hidden, cfg, Xv, yv)
    net.meta = {
        "kind": "value",
        "car": int(car),
        "mode": mode,
        "horizon": horizon,
        "gamma": cfg.gamma,
        "target_range": [float(y.min()), float(y.max())],
        "track_length": float(track_length),
        "n_cars": int(races[0].n_cars),
    }
    metrics["target_range"] = net.meta["target_range"]
    return net, metrics


# --------------------------------------------------------------------------- alpha-potential


@dataclass
class PotentialSample:
    x: np.ndarray  # joint state (n_cars, 6)
    theta: np.ndarray  # (n_cars, 5)
    theta_i_prime: np.ndarray  # (5,)
    i: int
    dV: float

    def deviated(self) -> np.ndarray:
        th = self.theta.copy()
        th[self.i] = self.theta_i_prime
        return th


def _sample_arrays(samples: Sequence[PotentialSample], track_length: float):
    S = np.array([s.x for s in samples])
    A = np.array([s.theta for s in samples])
    B = np.array([s.deviated() for s in samples])
    sf = state_features(S, track_length)
    dV = np.array([s.dV for s in samples])
    return joint_input(sf, A), joint_input(sf, B), dV


def build_potential_samples(
    races: Sequence[RaceRecord],
    value_nets: Sequence[Mlp],
    n_samples: int,
    seed: int,
    theta_box: dict,
    track_length: float,
) -> list[PotentialSample]:
    """Draw ``(x, theta, theta_i')`` and label with ``V^i(x, theta) - V^i(x, theta')`` from the value nets."""
    if not races:
        raise EmptyDataset("no races")
    rng = np.random.default_rng(seed)
    lo, hi = box_arrays(theta_box)
    n_cars = races[0].n_cars
    if len(value_nets) != n_cars:
        raise DimensionMismatch(f"need {n_cars} value nets, got {len(value_nets)}")
    xs, thetas, primes, cars = [], [], [], []
    for _ in range(n_samples):
        r = races[int(rng.integers(len(races)))]
        t = int(rng.integers(r.states.shape[0]))
        xs.append(r.states[t])
        thetas.append(rng.uniform(lo, hi, size=(n_cars, 5)))
        cars.append(int(rng.integers(n_cars)))
        primes.append(rng.uniform(lo, hi))
    out = []
    S = np.array(xs)
    sf = state_features(S, track_length) if n_samples else np.zeros((0, 0))
    for i in range(n_cars):
        idx = [k for k in range(n_samples) if cars[k] == i]
        if not idx:
            continue
        A = np.array([thetas[k] for k in idx])
        B = A.copy()
        B[:, i] = np.array([primes[k] for k in idx])
        va = predict(value_nets[i], joint_input(sf[idx], A))
        vb = predict(value_nets[i], joint_input(sf[idx], B))
        for n, k in enumerate(idx):
            out.append((k, PotentialSample(xs[k], thetas[k], primes[k], i, float(va[n] - vb[n]))))
    out.sort(key=lambda p: p[0])
    return [p[1] for p in out]


def potential_differences(phi: Mlp, samples: Sequence[PotentialSample], track_length: float) -> np.ndarray:
    XA, XB, _ = _sample_arrays(samples, track_length)
    return predict(phi, XA) - predict(phi, XB)


def train_potential(
    samples: Sequence[PotentialSample],
    track_length: float,
    hidden: Sequence[int] = (384, 384, 192),
    cfg: TrainConfig = TrainConfig(),
    holdout: Optional[Sequence[PotentialSample]] = None,
) -> tuple[Mlp, float, dict]:
    """Fit ``Phi`` so its unilateral differences match ``dV``; returns ``(Phi, alpha_hat, metrics)``.

    Trains on the mean squared violation.  ``alpha_hat`` is the largest
    absolute violation on the held-out samples (``holdout`` if given, else
    a ``val_fraction`` split).
    """
    if not samples:
        raise EmptySamples("no potential samples")
    samples = list(samples)
    if holdout is None:
        rng = np.random.default_rng(cfg.seed + 11)
        n_val = int(round(cfg.val_fraction * len(samples)))
        if len(samples) > 1:
            n_val = min(max(n_val, 1 if cfg.val_fraction > 0 else 0), len(samples) - 1)
        else:
            n_val = 0
        perm = rng.permutation(len(samples))
        holdout = [samples[k] for k in sorted(perm[:n_val])]
        train = [samples[k] for k in sorted(perm[n_val:])]
    else:
        train = samples
    XA, XB, dV = _sample_arrays(train, track_length)
    net = init_mlp(XA.shape[1], hidden, 1, seed=cfg.seed)
    # a zero output layer starts from exact potential differences of 0
    net.weights[-1][...] = 0.0
    fit_normalization(net, np.concatenate([XA, XB]))
    sd = float(np.std(dV)) or 1.0
    t = dV / sd
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(net.params(), cfg.learning_rate)
    history = []
    n = len(dV)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            X2 = np.concatenate([XA[idx], XB[idx]])
            out = _forward(net, X2)[-1][:, 0]
            m = len(idx)
            err = out[:m] - out[m:] - t[idx]
            total += float(err @ err)
            g = (2.0 / m) * err
            dW, db = mlp_grad(net, X2, np.concatenate([g, -g])[:, None])
            opt.step(_flat_grads(dW, db))
        history.append(total / n)
    # the bias cancels in differences, so only the scale needs undoing
    _scale_output(net, sd, 0.0)
    train_viol = potential_differences(net, train, track_length) - dV
    metrics = {"train_mse": float(np.mean(train_viol**2)), "train_max": float(np.max(np.abs(train_viol))),
               "history": history}
    if holdout:
        _, _, dv_h = _sample_arrays(holdout, track_length)
        viol = potential_differences(net, holdout, track_length) - dv_h
        alpha_hat = float(np.max(np.abs(viol)))
        metrics["holdout_mse"] = float(np.mean(viol**2))
        metrics["n_holdout"] = len(holdout)
    else:
        alpha_hat = metrics["train_max"]
        metrics["n_holdout"] = 0
    metrics["alpha_hat"] = alpha_hat
    net.meta = {"kind": "potential", "alpha_hat": alpha_hat, "track_length": float(track_length),
                "n_cars": int(train[0].theta.shape[0])}
    return net, alpha_hat, metrics


@dataclass
class GapReport:
    gap_rel: np.ndarray
    median: float
    max: float
    value_range: float


def approximation_gap(phi: Mlp, samples: Sequence[PotentialSample], value_range: float, track_length: float) -> GapReport:
    """Relative gaps ``|dPhi - dV| / range(V)`` per sample."""
    if not samples:
        raise EmptySamples("no samples")
    if not value_range >= 1e-9:
        raise DegenerateRange(f"value range {value_range!r} is too small")
    _, _, dV = _sample_arrays(samples, track_length)
    gap = np.abs(potential_differences(phi, samples, track_length) - dV) / value_range
    return GapReport(gap, float(np.median(gap)), float(np.max(gap)), float(value_range))


def write_gap_csv(path, report: GapReport, header_comment: Optional[str] = None) -> None:
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("gap_rel\n")
        for g in report.gap_rel:
            fh.write(f"{float(g)!r}\n")
