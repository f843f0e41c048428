"""Acceptance suite: one check per criterion, each reporting a PASS/FAIL line.

The lines are collected into an "acceptance criteria" section of the pytest
terminal summary.

Criteria 10 to 12 share one trained pipeline (generate, value nets, potential)
built once per session.  ``RACEGAME_ACCEPT_RACES`` overrides its race count.
"""

import contextlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

import test_cli as tc
import test_dynamics as td
import test_learning as tl
import test_policy as tp
import test_track as tt
from conftest import ACCEPTANCE_LINES, ring_samples, s_samples, straight_samples
from oracles import closed_curvature_cost, dp_speed_profile, ring_offset_points
from racegame.cli import EXIT_OK, main
from racegame.dynamics import CarState, ControlInput, VehicleParams, step
from racegame.equilibrium import grid_alpha, grid_argmax, grid_exploitability, payoff_grid, region_starts
from racegame.game import GameConfig, RaceEnv, random_race, read_dataset
from racegame.learning import Mlp, joint_input, predict, state_features
from racegame.policy import DEFAULT_THETA_BOX, box_arrays
from racegame.track import VelocityProfileConfig, build_track, compute_raceline, velocity_profile

pytestmark = pytest.mark.slow

N_RACES = int(os.environ.get("RACEGAME_ACCEPT_RACES", "1000"))


@contextlib.contextmanager
def criterion(number, title, budget_s=None):
    """Time the block, print its verdict and re-raise any failure."""
    info = {}
    t0 = time.perf_counter()
    why = ""
    try:
        yield info
    except Exception as exc:
        why = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        raise
    finally:
        elapsed = time.perf_counter() - t0
        over = not why and budget_s is not None and elapsed > budget_s
        if over:
            why = f"over the {budget_s:g} s budget"
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        line = f"[criterion {number:2d}] {'FAIL' if why else 'PASS'} {title} ({elapsed:.1f} s"
        line += f"; {detail})" if detail else ")"
        if why:
            line += f" -- {why}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    if over:
        raise AssertionError(line)


def warm_up():
    # compiled kernels load from the on-disk cache once per process; keep that out of the timings
    step(CarState(0.0, 0.0, 0.0, 5.0, 0.0, 0.0), ControlInput(0.5, 0.0), VehicleParams(), 0.0, 0.1)


# --------------------------------------------------------------------------- 1 to 8: component contracts


def test_c01_dynamics():
    warm_up()
    with criterion(1, "dynamics invariances (1e-9, 1000 vehicles) and hand example (1e-12)", 1.0):
        td.test_hand_evaluated_straight_step()
        td.test_straight_line_invariance_random_parameterisations()
        td.test_mirror_symmetry_random_parameterisations()


def test_c02_frenet_round_trip():
    ring = build_track(ring_samples(), closed=True)
    s_track = build_track(s_samples(), closed=False)
    tt._round_trip_errors(ring, np.random.default_rng(9), 5)
    with criterion(2, "Frenet round trip < 1e-6 m on 1000 points per track", 1.0) as info:
        worst = max(tt._round_trip_errors(t, np.random.default_rng(k), 1000).max()
                    for k, t in enumerate((ring, s_track)))
        info["max_err"] = f"{worst:.2e}"
        assert worst < 1e-6


def test_c03_raceline():
    with criterion(3, "ring raceline within 1e-3 of brute force; straight sum eta^2 < 1e-9", 10.0) as info:
        ring = build_track(ring_samples(), closed=True)
        rl = compute_raceline(ring, 2.0)
        offsets = np.round(np.arange(-2.0, 2.0001, 0.01), 10)
        costs = [closed_curvature_cost(ring_offset_points(20.0, 360, c)) for c in offsets]
        best = offsets[int(np.argmin(costs))]
        ring_err = float(np.max(np.abs(rl.eta - best)))
        straight = compute_raceline(build_track(straight_samples(), closed=False), 2.0)
        sq = float(np.sum(straight.eta ** 2))
        info["ring_err"] = f"{ring_err:.2e}"
        info["straight_sq"] = f"{sq:.2e}"
        assert ring_err < 1e-3 and sq < 1e-9


def test_c04_velocity_profile():
    with criterion(4, "analytic corner speed within 0.1%; hairpin DP within 1%", 10.0) as info:
        ring = build_track(ring_samples(), closed=True)
        rl = compute_raceline(ring, 2.0)
        v, _ = velocity_profile(rl, VelocityProfileConfig(v_cap=100.0), 0.8)
        analytic = float(np.max(np.abs(v / np.sqrt(0.8 * 9.81 / np.abs(rl.kappa)) - 1.0)))
        kappa = tt.hairpin_kappa()
        ds = 0.5
        v2, _ = velocity_profile(tt._line(kappa, ds), VelocityProfileConfig(v_cap=25.0, a_long_max=8.0), 0.8)
        ref = dp_speed_profile(kappa, np.full(len(kappa) - 1, ds), 0.8 * 9.81, 25.0, 8.0)
        dp = float(np.max(np.abs(v2 - ref) / ref))
        info["analytic"] = f"{analytic:.2e}"
        info["dp"] = f"{dp:.2e}"
        assert analytic < 1e-3 and dp < 1e-2


def test_c05_reference_formulas():
    with criterion(5, "overtake and blocking match the direct oracle to 1e-9 on 1000 configurations"):
        tp.test_adjustments_match_direct_oracle()


def test_c06_mpc_contract(track):
    with criterion(6, "MPC self-consistency <= 1e-2 K; monotone improvement on 500 solves; in-box", 120.0):
        tp.test_self_consistency_oracle(track)
        tp.test_monotone_improvement_and_feasibility_fuzz(track)


def test_c07_zero_sum(track):
    env = RaceEnv(track, VehicleParams(), GameConfig(T=200, n_cars=2))
    with criterion(7, "r1 + r2 == 0 exactly on every step of 50 two-car races") as info:
        steps = 0
        for k in range(50):
            rec = random_race(env, 7, k)
            assert np.all(rec.utilities[:, 0] + rec.utilities[:, 1] == 0.0), f"race {k}"
            steps += rec.T
        info["steps"] = steps


def test_c08_gradient_check():
    with criterion(8, "MLP gradients vs central differences < 1e-4 on 10 nets"):
        for seed in range(10):
            tl.test_gradient_matches_finite_differences(seed)


def test_c09_identical_interest():
    with criterion(9, "identical-interest alpha_hat < 5% of the dV range", 300.0) as info:
        _, alpha, _, span = tl.train_identical_interest()
        info["alpha_rel"] = f"{alpha / span:.2%}"
        assert alpha < 0.05 * span


# --------------------------------------------------------------------------- 10 to 12: trained pipeline


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    args = ["--out-dir", str(root), "--seed", "0"]
    ds = str(root / "dataset.jsonl")
    t0 = time.perf_counter()
    assert main(["generate", *args, "--races", str(N_RACES)]) == EXIT_OK
    for i in range(3):
        assert main(["train", *args, "--dataset", ds, "--target", "value", "--car", str(i)]) == EXIT_OK
    assert main(["train", *args, "--dataset", ds, "--target", "potential"]) == EXIT_OK
    return {"root": root, "args": args, "dataset": ds, "train_s": time.perf_counter() - t0}


def test_c10_gap_and_regret(trained):
    root, args, ds = trained["root"], trained["args"], trained["dataset"]
    meta, _ = read_dataset(ds)
    with criterion(10, f"{N_RACES} races: gap median <= 10%, max <= 30%; rollout regret <= 10%") as info:
        t0 = time.perf_counter()
        assert main(["evaluate", *args, "--dataset", ds, "--what", "gap"]) == EXIT_OK
        assert main(["evaluate", *args, "--dataset", ds, "--what", "regret"]) == EXIT_OK
        total = trained["train_s"] + time.perf_counter() - t0
        gap = json.loads((root / "gap_summary.json").read_text())
        reg = json.loads((root / "regret_summary.json").read_text())
        info.update(races=meta["n_races"],
                    gap_median=f"{gap['median']:.2%}", gap_max=f"{gap['max']:.2%}",
                    regret_median=f"{reg['median']:.2%}", regret_max=f"{reg['max']:.2%}",
                    candidates=reg["n_candidates"], pipeline_s=f"{total:.0f}")
        assert N_RACES >= 200 and reg["n_states"] == 20 and reg["n_candidates"] >= 50
        assert gap["median"] <= 0.10, "gap median"
        assert gap["max"] <= 0.30, "gap max"
        assert total < 1800.0, "pipeline over 30 min"
        assert reg["max"] <= 0.10, f"regret max {reg['max']:.2%} > 10%"


def test_c11_grid_certificate(trained, track):
    env = RaceEnv(track, VehicleParams(), GameConfig(T=50))
    phi = Mlp.load(trained["root"] / "models" / "potential.json")
    lo, hi = box_arrays(DEFAULT_THETA_BOX)
    base = np.tile(0.5 * (lo + hi), (3, 1))
    grid = [0.0, 2.0, 4.0]
    with criterion(11, "grid-argmax exploitability <= alpha_hat(grid), exact arithmetic", 300.0) as info:
        start = region_starts(env, "R2", np.random.default_rng(11))
        game = payoff_grid(env, start, base, "s1", grid, T=50)
        sf = state_features(np.array([s.to_array() for s in start]), track.length)
        profiles = list(game.profiles())
        thetas = np.repeat(base[None], len(profiles), axis=0)
        for k, a in enumerate(profiles):
            thetas[k, :, 2] = [grid[j] for j in a]
        phi_grid = predict(phi, joint_input(sf, thetas)).reshape((len(grid),) * 3)
        alpha = grid_alpha(game, phi_grid)
        expl = grid_exploitability(game, grid_argmax(phi_grid))
        info.update(exploitability=f"{float(expl):.4g}", alpha_hat=f"{float(alpha):.4g}")
        assert expl <= alpha


def test_c12_potential_vs_random(trained):
    root, args = trained["root"], trained["args"]
    with criterion(12, "ego potential vs two random opponents, 30 races over regions: win fraction >= 0.5",
                   1200.0) as info:
        assert main(["race", *args, "--ego", "potential", "--opp1", "random", "--opp2", "random",
                     "--n", "30", "--region", "all"]) == EXIT_OK
        res = json.loads((root / "results.json").read_text())
        regions = [r["region"] for r in res["races"]]
        info.update(wins=res["wins"], ego_fraction=f"{res['ego_win_fraction']:.2f}")
        assert all(regions.count(r) == 10 for r in set(regions))
        assert res["ego_win_fraction"] >= 0.5


# --------------------------------------------------------------------------- 13: determinism


def run_small_pipeline(root: Path) -> dict:
    root.mkdir(parents=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(dict(tc.TINY, output_dir="out")))
    common = ["--config", str(cfg), "--seed", "5"]
    ds = str(root / "out" / "dataset.jsonl")
    steps = [["generate", *common, "--races", "4"]]
    steps += [["train", *common, "--dataset", ds, "--target", "value", "--car", str(i)] for i in range(3)]
    steps += [["train", *common, "--dataset", ds, "--target", "potential"],
              ["race", *common, "--ego", "potential", "--n", "2"],
              ["evaluate", *common, "--dataset", ds, "--what", "gap"],
              ["evaluate", *common, "--dataset", ds, "--what", "regret"]]
    for s in steps:
        assert main(s) == EXIT_OK, " ".join(s[:1])
    out = root / "out"
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_c13_determinism(tmp_path):
    with criterion(13, "bitwise-identical dataset, model and result files across two runs") as info:
        a = run_small_pipeline(tmp_path / "a")
        b = run_small_pipeline(tmp_path / "b")
        info["files"] = len(a)
        assert a.keys() == b.keys()
        differ = [k for k in a if a[k] != b[k]]
        assert not differ, f"files differ: {differ}"
