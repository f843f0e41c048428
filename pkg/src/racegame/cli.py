"""Batch entry points: raceline, generate, train, race, evaluate.

Every command is deterministic for a fixed ``--seed`` and stamps its outputs
with the experiment's config hash and seed.  Exit codes: 0 success,
2 invalid input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import CarState, VehicleParams, default_vehicle_path
from .equilibrium import (
    ArgmaxConfig,
    ControllerSpec,
    IbrConfig,
    candidate_thetas,
    maximize_potential,
    nash_regret,
    paired_rollout_dv,
    potential_objective,
    race,
    region_starts,
    rollout_evaluator,
)
from .errors import RaceGameError, ValidationError
from .game import GameConfig, RaceEnv, config_hash, generate_dataset, read_dataset
from .learning import (
    Mlp,
    TrainConfig,
    approximation_gap,
    build_potential_samples,
    split_by_race,
    train_potential,
    train_value,
    write_gap_csv,
)
from .policy import THETA_NAMES, PolicyParams
from .svg import race_trajectories, track_svg
from .track import (
    VelocityProfileConfig,
    compute_raceline,
    default_track_path,
    load_track,
    profile_library,
    write_raceline_csv,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

# seeds offsets so the stages draw from unrelated streams
HOLDOUT_SEED_OFFSET = 1_000_003
REGRET_SEED_OFFSET = 2_000_003
START_SEED_OFFSET = 3_000_017


def _sub_config(cls, d: Optional[dict], what: str):
    if d is None:
        return cls()
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown {what} keys: {sorted(unknown)}")
    d = dict(d)
    if "warm_start" in d and d["warm_start"] is not None:
        d["warm_start"] = tuple(d["warm_start"])
    return cls(**d)


@dataclass
class ExperimentConfig:
    """Everything a pipeline run depends on; relative paths resolve against the config file."""

    track: Optional[str] = None  # default: bundled track
    closed: bool = True
    vehicle: Optional[str] = None  # default: bundled vehicle parameters
    game: GameConfig = field(default_factory=lambda: GameConfig(T=200))
    value_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=3e-4, epochs=12))
    value_hidden: tuple = (128, 128, 64)
    value_mode: str = "return"
    value_horizon: Optional[int] = 50
    potential_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, epochs=30))
    potential_hidden: tuple = (384, 384, 192)
    potential_samples: int = 20000
    holdout_samples: int = 2000
    argmax: ArgmaxConfig = field(default_factory=lambda: ArgmaxConfig(learning_rate=1e-2, max_iters=100, restarts=8))
    ibr: IbrConfig = field(default_factory=IbrConfig)
    replan_every: int = 10
    regret_states: int = 20
    regret_candidates: int = 50
    regret_horizon: int = 50
    output_dir: str = "out"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.value_mode not in ("return", "td"):
            raise ValidationError("value_mode must be 'return' or 'td'")
        for name in ("potential_samples", "holdout_samples", "regret_states", "regret_candidates",
                     "regret_horizon", "replan_every", "workers"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.value_horizon is not None and self.value_horizon < 1:
            raise ValidationError("value_horizon must be >= 1 or null")

    # ------------------------------------------------------------------ io

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, GameConfig):
                v = v.to_dict()
            elif isinstance(v, (TrainConfig, ArgmaxConfig, IbrConfig)):
                v = asdict(v)
                if v.get("warm_start") is not None:
                    v["warm_start"] = list(v["warm_start"])
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown experiment config keys: {sorted(unknown)}")
        d = dict(d)
        if "game" in d:
            d["game"] = GameConfig.from_dict(d["game"])
        for key in ("value_train", "potential_train"):
            if key in d:
                d[key] = _sub_config(TrainConfig, d[key], key)
        if "argmax" in d:
            d["argmax"] = _sub_config(ArgmaxConfig, d["argmax"], "argmax")
        if "ibr" in d:
            d["ibr"] = _sub_config(IbrConfig, d["ibr"], "ibr")
        for key in ("value_hidden", "potential_hidden"):
            if key in d:
                d[key] = tuple(int(h) for h in d[key])
        if base_dir is not None:
            for key in ("track", "vehicle", "output_dir"):
                if d.get(key) is not None and not os.path.isabs(d[key]):
                    d[key] = str(Path(base_dir) / d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        cfg = cls.from_dict(doc, base_dir=path.parent)
        cfg.check_paths()
        return cfg

    def check_paths(self) -> None:
        for key in ("track", "vehicle"):
            p = getattr(self, key)
            if p is not None and not Path(p).is_file():
                raise ValidationError(f"{key} file {p} does not exist")
        out = Path(self.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise ValidationError(f"output directory {out} is not writable")

    def hash(self) -> str:
        d = self.to_dict()
        # where results go does not change what they are
        d.pop("output_dir")
        d.pop("workers")
        return config_hash(d)

    # ------------------------------------------------------------------ builders

    def track_path(self) -> Path:
        return Path(self.track) if self.track else default_track_path()

    def vehicle_params(self) -> VehicleParams:
        try:
            return VehicleParams.from_json(self.vehicle or default_vehicle_path())
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"vehicle parameters: {exc}") from exc

    def env(self) -> RaceEnv:
        return RaceEnv(load_track(self.track_path(), self.closed), self.vehicle_params(), self.game)


def _stamp(cfg_hash: str, seed: int) -> str:
    return f"config_hash={cfg_hash} seed={seed}"


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _models_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.models) if getattr(args, "models", None) else Path(cfg.output_dir) / "models"


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "out_dir", None):
        changes["output_dir"] = args.out_dir
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if changes:
        cfg = replace(cfg, **changes)
    cfg.check_paths()
    return cfg


def _value_nets(models: Path, n_cars: int) -> list[Mlp]:
    nets = []
    for i in range(n_cars):
        p = models / f"value_{i}.json"
        if not p.is_file():
            raise ValidationError(f"missing value model {p}; run 'train --target value --car {i}' first")
        nets.append(Mlp.load(p))
    return nets


def _potential_net(models: Path) -> Mlp:
    p = models / "potential.json"
    if not p.is_file():
        raise ValidationError(f"missing potential model {p}; run 'train --target potential' first")
    return Mlp.load(p)


def _value_range(meta: dict) -> float:
    lo, hi = meta["value_range"]
    return float(hi - lo)


def _write_metrics_csv(path, metrics: dict, stamp: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {stamp}\n")
        w = csv.writer(fh)
        w.writerow(["name", "value"])
        for k in sorted(metrics):
            v = metrics[k]
            if k == "history":
                for e, loss in enumerate(v):
                    w.writerow([f"train_loss_epoch_{e}", repr(float(loss))])
            elif isinstance(v, (int, float)):
                w.writerow([k, repr(v)])
            elif isinstance(v, (list, tuple)):
                w.writerow([k, " ".join(repr(float(x)) for x in v)])


# --------------------------------------------------------------------------- commands


def cmd_raceline(args) -> int:
    track = load_track(args.track, args.closed)
    vcfg = VelocityProfileConfig(w_veh=args.w_veh)
    rl = compute_raceline(track, args.w_veh)
    lib = profile_library(rl, vcfg)
    v, a = lib.lookup(args.mu)
    stamp = _stamp(config_hash({"track": str(args.track), "closed": args.closed, "w_veh": args.w_veh,
                                "mu": args.mu}), 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_raceline_csv(out, rl.with_profile(v, a), header_comment=stamp)
    lib_path = out.with_name(out.stem + "_profiles.json")
    _write_json(lib_path, {
        "meta": {"stamp": stamp, "config": asdict(vcfg)},
        "mus": lib.mus.tolist(),
        "v_x": lib.v_x.tolist(),
        "a_x": lib.a_x.tolist(),
    })
    print(f"wrote {out} and {lib_path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    if args.races < 1:
        raise ValidationError("--races must be >= 1")
    env = cfg.env()
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "dataset.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {"experiment_hash": cfg.hash()}
    meta, races = generate_dataset(env, args.races, cfg.seed, path=out, workers=cfg.workers, extra=extra,
                                   horizon=cfg.value_horizon)
    print(f"wrote {len(races)} races to {out} (value range {meta['value_range'][0]:.2f}..{meta['value_range'][1]:.2f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    meta, races = read_dataset(args.dataset)
    env = cfg.env()
    L = env.track.length
    n_cars = races[0].n_cars
    models = _models_dir(args, cfg)
    models.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg.hash(), cfg.seed)
    provenance = {"config_hash": cfg.hash(), "seed": cfg.seed, "dataset_hash": meta.get("config_hash")}
    if args.target == "value":
        if args.car is None or not 0 <= args.car < n_cars:
            raise ValidationError(f"--car must be in 0..{n_cars - 1}")
        tc = replace(cfg.value_train, seed=cfg.seed, gamma=cfg.game.gamma)
        net, metrics = train_value(races, args.car, L, cfg.value_hidden, tc, mode=cfg.value_mode,
                                   horizon=cfg.value_horizon)
        net.meta.update(provenance)
        net.save(models / f"value_{args.car}.json")
        _write_metrics_csv(models / f"value_{args.car}_metrics.csv", metrics, stamp)
        print(f"value net car {args.car}: val R^2 {metrics.get('val_r2', float('nan')):.3f}")
        return EXIT_OK
    nets = _value_nets(models, n_cars)
    box = cfg.game.theta_box
    samples = build_potential_samples(races, nets, cfg.potential_samples, cfg.seed, box, L)
    holdout = build_potential_samples(races, nets, cfg.holdout_samples, cfg.seed + HOLDOUT_SEED_OFFSET, box, L)
    tc = replace(cfg.potential_train, seed=cfg.seed)
    phi, alpha_hat, metrics = train_potential(samples, L, cfg.potential_hidden, tc, holdout=holdout)
    metrics["alpha_hat_rel"] = alpha_hat / _value_range(meta)
    phi.meta.update(provenance)
    phi.meta["value_range"] = list(meta["value_range"])
    phi.save(models / "potential.json")
    _write_metrics_csv(models / "potential_metrics.csv", metrics, stamp)
    print(f"potential: alpha_hat {alpha_hat:.3f} ({metrics['alpha_hat_rel']:.1%} of the value range)")
    return EXIT_OK


def parse_controller(text: str, cfg: ExperimentConfig, models: Path) -> ControllerSpec:
    kind, _, arg = text.partition(":")
    if kind == "fixed":
        if not arg:
            raise ValidationError("fixed controller needs a parameter file: fixed:theta.json")
        p = Path(arg)
        if not p.is_file():
            raise ValidationError(f"parameter file {p} does not exist")
        doc = json.loads(p.read_text())
        vals = [doc[n] for n in THETA_NAMES] if isinstance(doc, dict) else list(doc)
        if len(vals) != 5:
            raise ValidationError(f"{p}: expected 5 parameters")
        return ControllerSpec("fixed", theta=PolicyParams.from_array(vals))
    if arg:
        raise ValidationError(f"controller {kind!r} takes no argument")
    if kind == "potential":
        return ControllerSpec("potential", phi=_potential_net(models), argmax=cfg.argmax)
    if kind == "ibr":
        return ControllerSpec("ibr", ibr=cfg.ibr)
    if kind == "random":
        return ControllerSpec("random")
    raise ValidationError(f"unknown controller {text!r}; use potential, ibr, random or fixed:FILE")


def run_races(cfg: ExperimentConfig, env: RaceEnv, specs, n: int, region: str, T: Optional[int] = None):
    """Race ``n`` times; ``region='all'`` cycles the ego start through every region."""
    names = [r.name for r in cfg.game.start_regions]
    if region != "all" and region not in names:
        raise ValidationError(f"--region must be one of {names} or 'all'")
    records, regions = [], []
    for k in range(n):
        reg = names[k % len(names)] if region == "all" else region
        rng = np.random.default_rng([cfg.seed, k, START_SEED_OFFSET])
        start = region_starts(env, reg, rng, ego=0)
        rec = race(env, specs, start, T=T, seed=cfg.seed, race_id=k, replan_every=cfg.replan_every)
        records.append(rec)
        regions.append(reg)
    return records, regions


def cmd_race(args) -> int:
    cfg = _load_config(args)
    env = cfg.env()
    models = _models_dir(args, cfg)
    texts = [args.ego, args.opp1, args.opp2][: cfg.game.n_cars]
    if cfg.game.n_cars > 3:
        raise ValidationError("the race command drives at most 3 cars")
    specs = [parse_controller(t, cfg, models) for t in texts]
    if args.n < 1:
        raise ValidationError("--n must be >= 1")
    records, regions = run_races(cfg, env, specs, args.n, args.region)
    out = Path(cfg.output_dir)
    stamp = _stamp(cfg.hash(), cfg.seed)
    L = env.track.length
    wins = [0] * cfg.game.n_cars
    summary = []
    for rec, reg in zip(records, regions):
        wins[rec.winner] += 1
        final = rec.states[-1, :, 0]
        summary.append({
            "race_id": rec.race_id,
            "region": reg,
            "winner": rec.winner,
            "final_p_x": final.tolist(),
            "laps": [float(v / L) for v in final],
            "controller_fallbacks": rec.fallbacks,
        })
    _write_json(out / "results.json", {
        "meta": {"config_hash": cfg.hash(), "seed": cfg.seed, "controllers": texts},
        "n": len(records),
        "wins": wins,
        "ego_win_fraction": wins[0] / len(records),
        "races": summary,
    })
    with open(out / "trajectories.csv", "w", newline="") as fh:
        fh.write(f"# {stamp}\n")
        w = csv.writer(fh)
        w.writerow(["race_id", "t", "car", "p_x", "p_y", "phi", "v_tilde_x", "v_tilde_y", "omega"])
        for rec in records:
            for t in range(rec.states.shape[0]):
                for i in range(rec.n_cars):
                    w.writerow([rec.race_id, t, i] + [repr(float(v)) for v in rec.states[t, i]])
    svg = track_svg(env.track, race_trajectories(env.track, records[0].states),
                    labels=[f"car {i}: {t}" for i, t in enumerate(texts)], comment=stamp)
    (out / "track.svg").write_text(svg)
    print(f"ego won {wins[0]}/{len(records)} races; wins per car {wins}")
    return EXIT_OK


def regret_states(races, cfg: ExperimentConfig, n_states: int):
    """Joint states drawn from the races held out of value training."""
    val = split_by_race(len(races), cfg.value_train.val_fraction, cfg.seed)
    pool = [r for r, v in zip(races, val) if v] or list(races)
    rng = np.random.default_rng(cfg.seed + REGRET_SEED_OFFSET)
    picks = []
    for _ in range(n_states):
        r = pool[int(rng.integers(len(pool)))]
        t = int(rng.integers(r.states.shape[0]))
        picks.append((r.race_id, t, r.states[t]))
    return picks, rng


def evaluate_regret(env: RaceEnv, phi: Mlp, races, cfg: ExperimentConfig, value_range: float):
    """Rollout-mode regret of ``argmax Phi``; the ego rotates over the cars."""
    picks, rng = regret_states(races, cfg, cfg.regret_states)
    n = env.cfg.n_cars
    reports = []
    for sid, (race_id, t, x) in enumerate(picks):
        ac = replace(cfg.argmax, seed=cfg.seed + sid)
        res = maximize_potential(potential_objective(phi, x, env.track.length), n, ac, env.cfg.theta_box)
        i = sid % n
        cands = candidate_thetas(res.theta[i], cfg.regret_candidates, env.cfg.theta_box, rng)
        start = [CarState.from_array(s) for s in x]
        rep = nash_regret(rollout_evaluator(env, start, i, cfg.regret_horizon), res.theta, i, cands,
                          value_range, sid)
        reports.append((rep, race_id, t, i))
    return reports


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    meta, races = read_dataset(args.dataset)
    env = cfg.env()
    models = _models_dir(args, cfg)
    phi = _potential_net(models)
    rng_v = _value_range(meta)
    out = Path(cfg.output_dir)
    stamp = _stamp(cfg.hash(), cfg.seed)
    L = env.track.length
    if args.what == "gap":
        nets = _value_nets(models, races[0].n_cars)
        holdout = build_potential_samples(races, nets, cfg.holdout_samples, cfg.seed + HOLDOUT_SEED_OFFSET,
                                          cfg.game.theta_box, L)
        rep = approximation_gap(phi, holdout, rng_v, L)
        write_gap_csv(out / "gap.csv", rep, header_comment=stamp)
        summary = {
            "meta": {"config_hash": cfg.hash(), "seed": cfg.seed},
            "n": int(len(rep.gap_rel)),
            "median": rep.median,
            "mean": float(np.mean(rep.gap_rel)),
            "max": rep.max,
            "value_range": rep.value_range,
        }
        if args.paired_rollout:
            # relabel a subset by simulation to audit the value-net labels
            audit = [replace(s, dV=paired_rollout_dv(env, s, cfg.regret_horizon))
                     for s in holdout[: args.paired_rollout]]
            arep = approximation_gap(phi, audit, rng_v, L)
            summary["paired_rollout"] = {"n": len(audit), "median": arep.median, "max": arep.max}
        _write_json(out / "gap_summary.json", summary)
        print(f"gap: median {rep.median:.2%}, max {rep.max:.2%} of the value range")
        return EXIT_OK
    reports = evaluate_regret(env, phi, races, cfg, rng_v)
    with open(out / "regret.csv", "w", newline="") as fh:
        fh.write(f"# {stamp}\n")
        w = csv.writer(fh)
        w.writerow(["state_id", "regret", "regret_rel"])
        for rep, *_ in reports:
            w.writerow([rep.state_id, repr(rep.regret), repr(rep.regret_rel)])
    rel = np.array([rep.regret_rel for rep, *_ in reports])
    _write_json(out / "regret_summary.json", {
        "meta": {"config_hash": cfg.hash(), "seed": cfg.seed},
        "n_states": len(reports),
        "n_candidates": cfg.regret_candidates,
        "horizon": cfg.regret_horizon,
        "median": float(np.median(rel)),
        "mean": float(np.mean(rel)),
        "max": float(np.max(rel)),
        "value_range": rng_v,
        "states": [{"state_id": rep.state_id, "race_id": rid, "t": t, "ego": i} for rep, rid, t, i in reports],
    })
    print(f"regret: median {np.median(rel):.2%}, max {np.max(rel):.2%} of the value range")
    return EXIT_OK


# --------------------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="racegame", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON (defaults used when omitted)")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out-dir", help="overrides the config output directory")

    r = sub.add_parser("raceline", help="minimum-curvature raceline and speed profiles")
    r.add_argument("--track", required=True, help="CSV with columns x,y,w")
    r.add_argument("--closed", action="store_true", help="treat the track as a loop")
    r.add_argument("--out", required=True, help="raceline CSV path")
    r.add_argument("--w-veh", type=float, default=2.0)
    r.add_argument("--mu", type=float, default=0.8, help="friction for the speed column")
    r.set_defaults(func=cmd_raceline)

    g = sub.add_parser("generate", help="simulate random-parameter races")
    common(g)
    g.add_argument("--races", type=int, required=True)
    g.add_argument("--out", help="dataset path (default OUT_DIR/dataset.jsonl)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit value networks, then the potential")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--target", choices=("value", "potential"), required=True)
    t.add_argument("--car", type=int, help="car index for --target value")
    t.add_argument("--models", help="model directory (default OUT_DIR/models)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("race", help="race controllers against each other")
    common(c)
    c.add_argument("--ego", default="potential", help="potential | ibr | random | fixed:FILE")
    c.add_argument("--opp1", default="random")
    c.add_argument("--opp2", default="random")
    c.add_argument("--n", type=int, default=30)
    c.add_argument("--region", default="all", help="ego start region (R1, R2, R3) or 'all' to cycle")
    c.add_argument("--models", help="model directory (default OUT_DIR/models)")
    c.set_defaults(func=cmd_race)

    e = sub.add_parser("evaluate", help="approximation gap or Nash regret")
    common(e)
    e.add_argument("--what", choices=("gap", "regret"), required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--models", help="model directory (default OUT_DIR/models)")
    e.add_argument("--paired-rollout", type=int, default=0, metavar="N",
                   help="also score the gap against rollout-simulated labels on N samples")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RaceGameError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
