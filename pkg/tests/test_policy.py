import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import blocking_direct, overtake_direct
from racegame.dynamics import CarState, ControlInput, VehicleParams, euler_step
from racegame.game import timed_raceline
from racegame.policy import (
    DEFAULT_THETA_BOX,
    Controller,
    MpcConfig,
    Opponent,
    PolicyParams,
    ReferenceTrajectory,
    TimedRaceline,
    blocking_adjustment,
    mpc_solve,
    neighbours,
    overtake_adjustment,
    perturbed_raceline,
    policy_act,
    reference_trajectory,
)
from racegame.track import build_track, compute_raceline

VP = VehicleParams()


@pytest.fixture(scope="module")
def long_straight():
    return build_track([(float(i), 0.0, 10.0) for i in range(400)], closed=False)


@pytest.fixture(scope="module")
def straight_line_10(long_straight):
    rl = compute_raceline(long_straight, 2.0)
    n = len(rl.s)
    return TimedRaceline(long_straight, rl.with_profile(np.full(n, 10.0), np.zeros(n)))


@pytest.fixture(scope="module")
def loop_line(track):
    return timed_raceline(track, 2.0, 0.8)


# --------------------------------------------------------------------------- perturbed raceline


def test_half_speed_offsets(straight_line_10):
    p = perturbed_raceline(straight_line_10, CarState(p_x=20.0), 0.5, 3, 0.1)
    assert np.allclose(p.p_x[1:] - p.p_x[0], [0.5, 1.0, 1.5], atol=1e-9)


def test_zero_zeta_stays_at_anchor(loop_line):
    p = perturbed_raceline(loop_line, CarState(p_x=100.0), 0.0, 10, 0.1)
    assert np.all(p.p_x == p.p_x[0]) and np.all(p.p_y == p.p_y[0])


def test_unit_zeta_reproduces_raceline(loop_line):
    tau0 = loop_line.time_at(100.0)
    p = perturbed_raceline(loop_line, CarState(p_x=100.0), 1.0, 20, 0.1)
    px, py = loop_line.position_at(tau0 + 0.1 * np.arange(21))
    assert np.max(np.abs(p.p_x - px)) < 1e-9
    assert np.max(np.abs(p.p_y - py)) < 1e-9


def test_timed_raceline_wraps_laps(loop_line):
    t = loop_line.time_at(50.0)
    assert loop_line.time_at(50.0 + loop_line.length) == pytest.approx(t + loop_line.period)


# --------------------------------------------------------------------------- adjustments


def test_overtake_example():
    ahead = Opponent(p_x=10.0, p_y=0.0, v_x=0.0)
    shift = overtake_adjustment(1.0, ahead, None, np.array([10.0]), 2.0, 0.1, 0.1)
    assert shift[0] == pytest.approx(1.0)


def test_overtake_zero_outside_reach():
    ahead = Opponent(p_x=10.0, p_y=0.0, v_x=0.0)
    assert overtake_adjustment(2.5, ahead, None, np.array([10.0]), 2.0, 0.1, 0.1)[0] == 0.0


def test_overtake_decays_with_distance():
    ahead = Opponent(p_x=40.0, p_y=0.0, v_x=0.0)
    assert abs(overtake_adjustment(1.0, ahead, None, np.array([10.0]), 2.0, 0.1, 0.1)[0]) < 1e-30


def test_overtake_sign_of_zero_is_positive():
    ahead = Opponent(p_x=10.0, p_y=0.5, v_x=0.0)
    assert overtake_adjustment(0.5, ahead, None, np.array([10.0]), 2.0, 0.1, 0.1)[0] == pytest.approx(2.0)


def test_blocking_example():
    behind = Opponent(p_x=10.0, p_y=1.0, v_x=10.0)
    # ego level with the opponent at k=1 and slower
    h = blocking_adjustment(np.array([11.0]), np.array([0.0]), np.array([9.0]), None, behind, 0.1, 0.5, 0.1)
    assert h[0] == pytest.approx(1.0 - math.exp(0.5), abs=1e-12)
    assert h[0] == pytest.approx(-0.6487, abs=1e-4)


def test_blocking_inactive_when_faster_or_behind():
    behind = Opponent(p_x=10.0, p_y=1.0, v_x=10.0)
    faster = blocking_adjustment(np.array([11.0]), np.array([0.0]), np.array([12.0]), None, behind, 0.1, 0.5, 0.1)
    assert faster[0] == 0.0
    ahead = Opponent(p_x=20.0, p_y=1.0, v_x=10.0)
    trailing = blocking_adjustment(np.array([11.0]), np.array([0.0]), np.array([9.0]), ahead, None, 0.1, 0.5, 0.1)
    assert trailing[0] == 0.0


def test_blocking_sign_switch():
    behind = Opponent(p_x=10.0, p_y=1.0, v_x=10.0)
    args = (np.array([11.0]), np.array([0.0]), np.array([9.0]), None, behind, 0.1, 0.5, 0.1)
    assert blocking_adjustment(*args, toward=True)[0] == -blocking_adjustment(*args)[0]


def _random_opp(rng, present):
    if not present:
        return None
    return (rng.uniform(-20, 20), rng.uniform(-3, 3), rng.uniform(0, 20))


def test_adjustments_match_direct_oracle():
    rng = np.random.default_rng(5)
    for n in range(1000):
        K = int(rng.integers(1, 12))
        dt = 0.1
        ahead = _random_opp(rng, rng.random() < 0.8)
        behind = _random_opp(rng, rng.random() < 0.8)
        if n % 10 == 0 and ahead is not None:
            # exact lateral tie exercises sign(0)
            ego_py = ahead[1]
        else:
            ego_py = rng.uniform(-3, 3)
        px = np.cumsum(rng.uniform(0, 2, size=K)) + rng.uniform(-10, 10)
        py = rng.uniform(-3, 3, size=K)
        vx = rng.uniform(0, 20, size=K)
        if n % 7 == 0 and behind is not None:
            # speed tie exercises the <= indicator
            vx[:] = behind[2]
        s1, s2, s3 = rng.uniform(0, 4), rng.uniform(0, 0.2), rng.uniform(0, 1)
        opp = [None if o is None else Opponent(*o) for o in (ahead, behind)]
        got_ot = overtake_adjustment(ego_py, opp[0], opp[1], px, s1, s2, dt)
        got_bl = blocking_adjustment(px, py, vx, opp[0], opp[1], s2, s3, dt)
        assert np.allclose(got_ot, overtake_direct(ego_py, [ahead, behind], px, s1, s2, dt), rtol=0, atol=1e-9)
        assert np.allclose(got_bl, blocking_direct(px, py, vx, [ahead, behind], s2, s3, dt), rtol=0, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-30, 30), st.floats(0, 4), st.floats(0, 0.2))
def test_overtake_shift_bounded_by_reach(ego_py, opp_py, gap, s1, s2):
    opp = Opponent(p_x=0.0, p_y=opp_py, v_x=0.0)
    shift = overtake_adjustment(ego_py, opp, None, np.array([gap]), s1, s2, 0.1)
    assert abs(shift[0]) <= s1 + 1e-12


def test_neighbours():
    assert neighbours([5.0, 10.0, 1.0], 0) == (1, 2)
    assert neighbours([5.0, 10.0, 1.0], 1) == (None, 0)
    assert neighbours([5.0, 10.0, 1.0], 2) == (0, None)
    # equal p_x: the lower index counts as ahead
    assert neighbours([5.0, 5.0], 1) == (0, None)


# --------------------------------------------------------------------------- reference trajectory


def test_solo_reference_is_clipped_perturbed_line(loop_line):
    th = PolicyParams(1.0, 1.0, 3.0, 0.1, 0.5)
    cfg = MpcConfig(w_max=10.0)
    me = CarState(p_x=120.0, p_y=1.0, v_tilde_x=12.0)
    ref = reference_trajectory(loop_line, [me], 0, th, cfg)
    pert = perturbed_raceline(loop_line, me, 1.0, cfg.K, cfg.dt)
    assert np.array_equal(ref.p_x_ref, pert.p_x[1:])
    assert np.array_equal(ref.p_y_ref, np.clip(pert.p_y[1:], -5.0, 5.0))


def test_reference_clipped_to_half_width(straight_line_10):
    th = PolicyParams(1.0, 1.0, 10.0, 0.0, 0.0)
    cfg = MpcConfig(K=5, w_max=6.0)
    states = [CarState(p_x=50.0, p_y=0.0, v_tilde_x=10.0), CarState(p_x=52.0, p_y=-0.5, v_tilde_x=10.0),
              CarState(p_x=48.0, p_y=-0.5, v_tilde_x=10.0)]
    ref = reference_trajectory(straight_line_10, states, 0, th, cfg)
    # two opponents each push +9.5 m: clipped at the half width
    assert np.all(ref.p_y_ref == 3.0)


def test_reference_composes_the_two_adjustments(loop_line):
    th = PolicyParams(1.0, 0.9, 2.5, 0.05, 0.7)
    cfg = MpcConfig(w_max=10.0)
    states = [CarState(100.0, 0.5, 0.0, 12.0, 0.0, 0.0), CarState(104.0, -0.5, 0.0, 14.0, 0.0, 0.0),
              CarState(97.0, 1.0, 0.0, 13.0, 0.0, 0.0)]
    ref = reference_trajectory(loop_line, states, 0, th, cfg)
    pert = perturbed_raceline(loop_line, states[0], th.zeta, cfg.K, cfg.dt)
    px, py, vx = pert.p_x[1:], pert.p_y[1:], pert.v_x[1:]
    track = loop_line.track

    def view(s):
        kap = float(track.kappa_at(s.p_x))
        v = (s.v_tilde_x * math.cos(s.phi) - s.v_tilde_y * math.sin(s.phi)) / (1 - kap * s.p_y)
        return (s.p_x, s.p_y, v)

    opps = [view(states[1]), view(states[2])]
    ot = overtake_direct(0.5, opps, px, th.s1, th.s2, cfg.dt)
    bl = blocking_direct(px, py, vx, opps, th.s2, th.s3, cfg.dt)
    assert np.allclose(ref.p_y_ref, np.clip(py + np.array(ot) + np.array(bl), -5, 5), atol=1e-12)


def test_no_reach_and_no_block_gives_plain_line(loop_line):
    th = PolicyParams(1.0, 1.0, 0.0, 0.1, 0.0)
    cfg = MpcConfig(w_max=10.0)
    states = [CarState(100.0, 0.5, 0.0, 12.0, 0.0, 0.0), CarState(101.0, -0.5, 0.0, 14.0, 0.0, 0.0)]
    ref = reference_trajectory(loop_line, states, 0, th, cfg)
    pert = perturbed_raceline(loop_line, states[0], 1.0, cfg.K, cfg.dt)
    assert np.array_equal(ref.p_y_ref, np.clip(pert.p_y[1:], -5, 5))


def _mirror_track(track):
    from racegame.track import Track

    pts = track.points.copy()
    pts[:, 1] = -pts[:, 1]
    nrm = track.normals.copy()
    nrm[:, 0] = -nrm[:, 0]
    return Track(points=pts, s=track.s.copy(), kappa=-track.kappa, closed=track.closed, w_max=track.w_max,
                 normals=nrm)


def test_mirror_symmetry_of_reference(loop_line):
    from racegame.track import RaceLine

    track = loop_line.track
    mt = _mirror_track(track)
    rl = compute_raceline(track, 2.0)
    n = len(rl.s)
    v = np.full(n, 12.0)
    line = TimedRaceline(track, rl.with_profile(v, np.zeros(n)))
    mrl = RaceLine(x=rl.x, y=-rl.y, s=rl.s, psi=-rl.psi, kappa=-rl.kappa, eta=-rl.eta, p_x=rl.p_x, closed=True)
    mline = TimedRaceline(mt, mrl.with_profile(v, np.zeros(n)))
    th = PolicyParams(1.0, 0.9, 2.5, 0.05, 0.7)
    cfg = MpcConfig(w_max=10.0)
    states = [CarState(100.0, 0.5, 0.1, 12.0, 0.2, 0.05), CarState(104.0, -0.5, -0.1, 11.0, 0.1, 0.0),
              CarState(97.0, 1.0, 0.0, 13.0, -0.3, 0.1)]
    mirrored = [CarState(s.p_x, -s.p_y, -s.phi, s.v_tilde_x, -s.v_tilde_y, -s.omega) for s in states]
    for ego in range(3):
        a = reference_trajectory(line, states, ego, th, cfg)
        b = reference_trajectory(mline, mirrored, ego, th, cfg)
        assert np.array_equal(a.p_x_ref, b.p_x_ref)
        assert np.array_equal(a.p_y_ref, -b.p_y_ref)


# --------------------------------------------------------------------------- MPC


def _rollout_reference(track, x0, U, dt=0.1):
    X = [np.asarray(x0, float)]
    for d, delta in U:
        out = np.empty(6)
        euler_step(X[-1], d, delta, VP.as_array(), float(track.kappa_at(X[-1][0])), dt, out)
        X.append(out)
    X = np.array(X)
    return ReferenceTrajectory(X[1:, 0].copy(), X[1:, 1].copy())


def _feasible_controls(rng, K, u_prev):
    # slow random walks: the increment penalty then barely pulls the optimum off the source
    U = np.empty((K, 2))
    d, delta = u_prev
    for k in range(K):
        d = float(np.clip(d + rng.uniform(-0.01, 0.01), -0.5, 1.0))
        delta = float(np.clip(delta + rng.uniform(-0.005, 0.005), -0.2, 0.2))
        U[k] = (d, delta)
    return U


def test_self_consistency_oracle(track):
    rng = np.random.default_rng(11)
    cfg = MpcConfig(w_max=track.w_max)
    for _ in range(30):
        x0 = np.array([rng.uniform(0, 400), rng.uniform(-2, 2), rng.uniform(-0.1, 0.1), rng.uniform(8, 16), 0.0, 0.0])
        while True:
            u0 = (rng.uniform(-0.5, 1.0), rng.uniform(-0.1, 0.1))
            U = _feasible_controls(rng, cfg.K, u0)
            ref = _rollout_reference(track, x0, U)
            # keep sources that stay clear of the track-limit penalty
            if np.max(np.abs(ref.p_y_ref)) < track.w_max / 2.0 - 0.5:
                break
        res = mpc_solve(CarState(*x0), ref, None, 1.0, VP, cfg, track, u_prev=ControlInput(*u0))
        assert res.objective <= 1e-2 * cfg.K
        assert abs(res.u0.d - U[0, 0]) <= 0.1 * 2.0
        assert abs(res.u0.delta - U[0, 1]) <= 0.1 * 0.5


def test_monotone_improvement_and_feasibility_fuzz(track):
    rng = np.random.default_rng(12)
    cfg = MpcConfig(w_max=track.w_max)
    lo = VP.control_bounds()
    for _ in range(500):
        x0 = CarState(rng.uniform(0, 400), rng.uniform(-4, 4), rng.uniform(-0.3, 0.3), rng.uniform(0, 20),
                      rng.uniform(-1, 1), rng.uniform(-0.5, 0.5))
        ref = ReferenceTrajectory(x0.p_x + np.cumsum(rng.uniform(0, 2.5, cfg.K)), rng.uniform(-5, 5, cfg.K))
        warm = np.column_stack((rng.uniform(-1, 1, cfg.K), rng.uniform(-0.25, 0.25, cfg.K)))
        res = mpc_solve(x0, ref, None, rng.uniform(0.1, 5), VP, cfg, track, warm=warm, u_prev=ControlInput(0.0, 0.0))
        assert res.objective <= res.start_objective
        U = res.controls
        assert np.all((U[:, 0] >= lo[0]) & (U[:, 0] <= lo[1]))
        assert np.all((U[:, 1] >= lo[2]) & (U[:, 1] <= lo[3]))
        rates = np.diff(np.concatenate(([0.0], U[:, 1])))
        assert np.all((rates >= lo[4] - 1e-12) & (rates <= lo[5] + 1e-12))


def test_far_opponents_do_not_change_solution(track):
    cfg = MpcConfig(w_max=track.w_max)
    x0 = CarState(50.0, 0.0, 0.0, 12.0, 0.0, 0.0)
    ref = ReferenceTrajectory(50.0 + 1.2 * np.arange(1, 21), np.full(20, 1.0))
    opp = np.stack([np.column_stack((250.0 + np.arange(20), np.zeros(20)))])
    a = mpc_solve(x0, ref, None, 1.0, VP, cfg, track)
    b = mpc_solve(x0, ref, opp, 1.0, VP, cfg, track)
    assert np.array_equal(a.controls, b.controls)
    assert a.objective == b.objective


def test_optimal_warm_start_is_kept(track):
    # one step, reference equal to the warm start's own result: nothing to improve
    cfg = MpcConfig(K=1, w_max=track.w_max)
    x0 = np.array([20.0, 0.0, 0.0, 10.0, 0.0, 0.0])
    warm = np.array([[0.3, 0.0]])
    ref = _rollout_reference(track, x0, warm)
    res = mpc_solve(CarState(*x0), ref, None, 1.0, VP, cfg, track, warm=warm, u_prev=ControlInput(0.3, 0.0))
    assert np.array_equal(res.controls, warm)


@pytest.mark.parametrize("start", [0.0, 360.0])
def test_closed_loop_tracking_stays_near_raceline(loop_line, track, start):
    cfg = MpcConfig(w_max=track.w_max)
    th = PolicyParams(1.0, 1.0, 0.0, 0.1, 0.0)
    ctl = Controller(loop_line, VP, cfg, th)
    # start on the raceline, aligned with it and at its speed
    slope = np.gradient(loop_line.eta, loop_line.p_x)
    speed = np.diff(loop_line.p_x) / np.diff(loop_line.t)
    x = CarState(start, float(np.interp(start, loop_line.p_x, loop_line.eta)),
                 float(np.arctan(np.interp(start, loop_line.p_x, slope))),
                 float(np.interp(start, loop_line.p_x[:-1], speed)), 0.0, 0.0)
    worst = 0.0
    for _ in range(100):
        u = policy_act([x], 0, ctl)
        out = np.empty(6)
        euler_step(x.to_array(), u.d, u.delta, VP.as_array(), float(track.kappa_at(x.p_x)), 0.1, out)
        x = CarState(*out)
        eta = float(np.interp(x.p_x % track.length, loop_line.p_x, loop_line.eta))
        worst = max(worst, abs(x.p_y - eta))
    assert worst < 0.5
    assert ctl.fallbacks == 0


def test_corner_parameters_give_in_box_controls(loop_line, track):
    lo = np.array([v[0] for v in DEFAULT_THETA_BOX.values()])
    hi = np.array([v[1] for v in DEFAULT_THETA_BOX.values()])
    for corner in (lo, hi):
        ctl = Controller(loop_line, VP, MpcConfig(w_max=track.w_max), PolicyParams.from_array(corner))
        u = policy_act([CarState(10.0, 0.0, 0.0, 10.0, 0.0, 0.0), CarState(14.0, 0.5, 0.0, 9.0, 0.0, 0.0)], 0, ctl)
        assert VP.d_min <= u.d <= VP.d_max and VP.delta_min <= u.delta <= VP.delta_max


def test_far_apart_two_car_matches_solo(loop_line, track):
    cfg = MpcConfig(w_max=track.w_max)
    th = PolicyParams(2.0, 1.0, 2.0, 0.1, 0.5)
    me = CarState(30.0, 0.0, 0.0, 12.0, 0.0, 0.0)
    far = CarState(230.0, 0.0, 0.0, 12.0, 0.0, 0.0)
    a = policy_act([me], 0, Controller(loop_line, VP, cfg, th))
    b = policy_act([me, far], 0, Controller(loop_line, VP, cfg, th))
    assert a == b


def test_integer_previous_control_matches_float(track):
    cfg = MpcConfig(w_max=track.w_max)
    x0 = CarState(50.0, 0.0, 0.0, 12.0, 0.0, 0.0)
    ref = ReferenceTrajectory(50.0 + 1.2 * np.arange(1, 21), np.full(20, 1.5))
    a = mpc_solve(x0, ref, None, 1.0, VP, cfg, track, u_prev=ControlInput(0, 0))
    b = mpc_solve(x0, ref, None, 1.0, VP, cfg, track, u_prev=ControlInput(0.0, 0.0))
    assert np.array_equal(a.controls, b.controls)
