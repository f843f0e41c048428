"""Track geometry, Frenet conversions, minimum-curvature raceline and speed profiles.

A track is a polyline of centreline samples ``(x, y, w)``.  Positions on the
track are expressed in a Frenet frame ``(p_x, p_y)``: arc length along the
centreline and signed lateral offset (left of the driving direction is
positive).  The lateral direction at an arbitrary ``p_x`` is the linear
interpolation of the unit normals at the two neighbouring samples, which makes
the forward map continuous and exactly invertible inside the track.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import lsq_linear

from .errors import (
    DegenerateGeometry,
    FrictionOutOfRange,
    OutOfRange,
    OutsideFrenetDomain,
    TooFewSamples,
    TrackTooNarrow,
)

RACELINE_COLUMNS = ("x", "y", "s", "v_x", "a_x", "psi", "kappa", "eta")


def menger_curvature(xy: np.ndarray, closed: bool) -> np.ndarray:
    """Signed three-point curvature of a polyline (left turns positive).

    For closed polylines ``xy`` holds the unique nodes only (no repeated
    closing point) and neighbours wrap around.  Open polylines copy the
    neighbouring value onto the two endpoints.
    """
    n = len(xy)
    if closed:
        a = np.roll(xy, 1, axis=0)
        b = xy
        c = np.roll(xy, -1, axis=0)
    else:
        a, b, c = xy[:-2], xy[1:-1], xy[2:]
    ab = b - a
    bc = c - b
    ac = c - a
    cross = ab[:, 0] * bc[:, 1] - ab[:, 1] * bc[:, 0]
    denom = np.linalg.norm(ab, axis=1) * np.linalg.norm(bc, axis=1) * np.linalg.norm(ac, axis=1)
    k = 2.0 * cross / denom
    if closed:
        return k
    out = np.empty(n)
    out[1:-1] = k
    out[0] = k[0]
    out[-1] = k[-1]
    return out


def _vertex_normals(xy: np.ndarray, closed: bool) -> np.ndarray:
    if closed:
        tang = np.roll(xy, -1, axis=0) - np.roll(xy, 1, axis=0)
    else:
        tang = np.empty_like(xy)
        tang[1:-1] = xy[2:] - xy[:-2]
        tang[0] = xy[1] - xy[0]
        tang[-1] = xy[-1] - xy[-2]
    tang /= np.linalg.norm(tang, axis=1)[:, None]
    return np.column_stack((-tang[:, 1], tang[:, 0]))


@dataclass(frozen=True)
class Track:
    """Discretised centreline.

    For closed tracks the last sample repeats the first one, so ``s[-1]`` is
    the lap length and every per-sample array has ``n_nodes + 1`` entries.
    """

    points: np.ndarray
    s: np.ndarray
    kappa: np.ndarray
    closed: bool
    w_max: float
    normals: np.ndarray = field(repr=False)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def w(self) -> np.ndarray:
        return self.points[:, 2]

    @property
    def length(self) -> float:
        return float(self.s[-1])

    @property
    def n_nodes(self) -> int:
        return len(self.s) - 1 if self.closed else len(self.s)

    def wrap(self, p_x):
        """Map an (unwrapped) arc length into ``[0, length)`` for closed tracks."""
        if self.closed:
            return np.mod(p_x, self.length)
        return p_x

    def kappa_at(self, p_x):
        """Curvature at arc length ``p_x`` by linear interpolation."""
        return np.interp(self.wrap(p_x), self.s, self.kappa)

    def width_at(self, p_x):
        return np.interp(self.wrap(p_x), self.s, self.w)

    @cached_property
    def segments(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Segment starts, direction vectors and squared lengths, for projections."""
        a0 = self.points[:-1, :2]
        e = self.points[1:, :2] - a0
        return a0, e, np.einsum("ij,ij->i", e, e)


def build_track(samples: Iterable[Sequence[float]], closed: bool = False) -> Track:
    """Build a :class:`Track` from ``(x, y, w)`` samples.

    Closed tracks may be given with or without a repeated closing sample.
    Self-intersection of the widened track is not checked.
    """
    pts = np.asarray(list(samples), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DegenerateGeometry("samples must be (x, y, w) triples")
    if closed and len(pts) > 1 and np.allclose(pts[0, :2], pts[-1, :2], rtol=0.0, atol=1e-12):
        pts = pts[:-1]
    if len(pts) < 3:
        raise TooFewSamples(f"need at least 3 distinct samples, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise DegenerateGeometry("samples must be finite")
    if np.any(pts[:, 2] <= 0):
        raise DegenerateGeometry("all widths must be positive")

    xy = pts[:, :2]
    nxt = np.roll(xy, -1, axis=0) if closed else xy[1:]
    seg = np.linalg.norm(nxt - (xy if closed else xy[:-1]), axis=1)
    if np.any(seg <= 1e-9):
        raise DegenerateGeometry("duplicated consecutive points")

    kappa = menger_curvature(xy, closed)
    normals = _vertex_normals(xy, closed)
    if closed:
        pts = np.vstack((pts, pts[:1]))
        kappa = np.append(kappa, kappa[0])
        normals = np.vstack((normals, normals[:1]))
    s = np.concatenate(([0.0], np.cumsum(seg)))
    if np.any(np.abs(kappa * pts[:, 2] / 2.0) >= 1.0):
        raise DegenerateGeometry("track too wide for its curvature (|kappa*w/2| >= 1)")
    return Track(points=pts, s=s, kappa=kappa, closed=closed, w_max=float(pts[:, 2].min()), normals=normals)


def _segment_index(track: Track, p_x):
    j = np.searchsorted(track.s, p_x, side="right") - 1
    return np.clip(j, 0, len(track.s) - 2)


def frenet_to_global(track: Track, p_x, p_y):
    """Map Frenet coordinates to global ``(x, y)``.  Accepts scalars or arrays."""
    p_x = np.asarray(p_x, dtype=float)
    p_y = np.asarray(p_y, dtype=float)
    if track.closed:
        p_x = np.mod(p_x, track.length)
    elif np.any(p_x < -1e-9) or np.any(p_x > track.length + 1e-9):
        raise OutOfRange(f"p_x outside [0, {track.length}] on an open track")
    j = _segment_index(track, p_x)
    s0 = track.s[j]
    t = (p_x - s0) / (track.s[j + 1] - s0)
    xy = track.points[:, :2]
    c = xy[j] + t[..., None] * (xy[j + 1] - xy[j])
    n = track.normals[j] + t[..., None] * (track.normals[j + 1] - track.normals[j])
    out = c + p_y[..., None] * n
    return out[..., 0], out[..., 1]


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def global_to_frenet(track: Track, x: float, y: float, n_candidates: int = 8) -> tuple[float, float]:
    """Project a global point onto the track; returns ``(p_x, p_y)``.

    The candidate segments are the nearest ones by Euclidean distance; on
    each, the lateral map is inverted exactly (a quadratic in the segment
    parameter).  Among valid solutions the one with the smallest lateral
    offset wins.
    """
    p = np.array([x, y], dtype=float)
    a0, e, ee = track.segments
    rel = p - a0
    t_near = np.clip(np.einsum("ij,ij->i", rel, e) / ee, 0.0, 1.0)
    off = rel - t_near[:, None] * e
    dist2 = np.einsum("ij,ij->i", off, off)
    order = np.argsort(dist2, kind="stable")[:n_candidates]

    A = rel[order]
    E = e[order]
    N0 = track.normals[order]
    DN = track.normals[order + 1] - N0
    coeffs = np.column_stack((-_cross(E, DN), _cross(A, DN) - _cross(E, N0), _cross(A, N0)))
    best = None
    for k, (qa, qb, qc) in enumerate(coeffs.tolist()):
        (ax, ay), (ex, ey), (nx, ny), (dx, dy) = A[k].tolist(), E[k].tolist(), N0[k].tolist(), DN[k].tolist()
        for t in _quadratic_roots(qa, qb, qc):
            if -1e-9 <= t <= 1.0 + 1e-9:
                t = min(max(t, 0.0), 1.0)
                vx, vy = nx + t * dx, ny + t * dy
                d = ((ax - t * ex) * vx + (ay - t * ey) * vy) / (vx * vx + vy * vy)
                if best is None or abs(d) < abs(best[1]):
                    j = order[k]
                    best = (float(track.s[j] + t * (track.s[j + 1] - track.s[j])), d)
    if best is None:
        raise OutsideFrenetDomain(f"point ({x}, {y}) has no projection onto the track")
    p_x, p_y = best
    k = float(track.kappa_at(p_x))
    if abs(k * p_y) >= 1.0:
        raise OutsideFrenetDomain(f"point ({x}, {y}) lies beyond the local radius of curvature")
    if track.closed:
        p_x = p_x % track.length
    return p_x, p_y


def _quadratic_roots(a: float, b: float, c: float) -> list[float]:
    scale = max(abs(a), abs(b), abs(c), 1e-300)
    if abs(a) <= 1e-14 * scale:
        if abs(b) <= 1e-300:
            return []
        return [-c / b]
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return []
    sq = math.sqrt(disc)
    q = -0.5 * (b + math.copysign(sq, b))
    roots = [q / a]
    if q != 0.0:
        roots.append(c / q)
    return roots


@dataclass(frozen=True)
class RaceLine:
    """Raceline sampled at the track's centreline samples.

    ``eta`` is the lateral offset from the centreline, so sample ``i`` sits at
    Frenet coordinates ``(track.s[i], eta[i])``.  ``v_x``/``a_x`` are ``None``
    until a velocity profile is attached with :meth:`with_profile`.
    """

    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    psi: np.ndarray
    kappa: np.ndarray
    eta: np.ndarray
    p_x: np.ndarray
    closed: bool
    v_x: Optional[np.ndarray] = None
    a_x: Optional[np.ndarray] = None

    def with_profile(self, v_x: np.ndarray, a_x: np.ndarray) -> "RaceLine":
        return replace(self, v_x=np.asarray(v_x, dtype=float), a_x=np.asarray(a_x, dtype=float))

    @property
    def length(self) -> float:
        return float(self.s[-1])


def _offset_path(track: Track, eta_nodes: np.ndarray) -> np.ndarray:
    n = track.n_nodes
    return track.points[:n, :2] + eta_nodes[:, None] * track.normals[:n]


def _raceline_cost(track: Track, eta_nodes: np.ndarray) -> float:
    k = menger_curvature(_offset_path(track, eta_nodes), track.closed)
    if not track.closed:
        k = k[1:-1]
    return float(np.dot(k, k))


def _curvature_jacobian(track: Track, eta: np.ndarray, h: float = 1e-6):
    """Curvature residuals and their Jacobian w.r.t. ``eta`` (central differences)."""
    closed = track.closed

    def curv(e):
        k = menger_curvature(_offset_path(track, e), closed)
        return k if closed else k[1:-1]

    k0 = curv(eta)
    jac = np.zeros((len(k0), len(eta)))
    for col in range(len(eta)):
        e_plus = eta.copy()
        e_minus = eta.copy()
        e_plus[col] += h
        e_minus[col] -= h
        jac[:, col] = (curv(e_plus) - curv(e_minus)) / (2.0 * h)
    return k0, jac


def compute_raceline(track: Track, w_veh: float, passes: int = 2, reg: float = 1e-10) -> RaceLine:
    """Minimum-curvature raceline within the track bounds (geometry only).

    Minimises the sum of squared three-point curvatures of the offset path
    over the lateral offsets ``eta`` with ``|eta_i| <= w_i/2 - w_veh/2``.  Each
    pass linearises curvature around the current offsets and solves the
    resulting bound-constrained least squares problem; the best iterate by
    true cost is kept, so the result never does worse than the centreline.
    ``reg`` is a tiny ridge term that makes the minimiser unique on straights.
    """
    n = track.n_nodes
    w = track.w[:n]
    if np.any(w <= w_veh):
        raise TrackTooNarrow(f"track width {w.min():.3f} m does not exceed vehicle width {w_veh} m")
    bound = w / 2.0 - w_veh / 2.0

    def total(e):
        return _raceline_cost(track, e) + reg * float(np.dot(e, e))

    eta = np.zeros(n)
    best, best_cost = eta, total(eta)
    for _ in range(max(1, passes)):
        k0, jac = _curvature_jacobian(track, eta)
        a = np.vstack((jac, math.sqrt(reg) * np.eye(n)))
        b = np.concatenate((jac @ eta - k0, np.zeros(n)))
        sol = lsq_linear(a, b, bounds=(-bound, bound), method="bvls", tol=1e-14)
        eta = np.clip(sol.x, -bound, bound)
        c = total(eta)
        if c < best_cost:
            best, best_cost = eta, c
    return _raceline_from_eta(track, best)


def _raceline_from_eta(track: Track, eta_nodes: np.ndarray) -> RaceLine:
    closed = track.closed
    path = _offset_path(track, eta_nodes)
    kappa = menger_curvature(path, closed)
    if closed:
        tang = np.roll(path, -1, axis=0) - np.roll(path, 1, axis=0)
    else:
        tang = np.gradient(path, axis=0)
    psi = np.arctan2(tang[:, 1], tang[:, 0])
    eta = eta_nodes
    if closed:
        path = np.vstack((path, path[:1]))
        kappa = np.append(kappa, kappa[0])
        psi = np.append(psi, psi[0])
        eta = np.append(eta, eta[0])
    s = np.concatenate(([0.0], np.cumsum(np.linalg.norm(np.diff(path, axis=0), axis=1))))
    return RaceLine(
        x=path[:, 0], y=path[:, 1], s=s, psi=psi, kappa=kappa, eta=eta, p_x=track.s.copy(), closed=closed
    )


@dataclass(frozen=True)
class VelocityProfileConfig:
    mu_min: float = 0.6
    mu_max: float = 1.2
    n_profiles: int = 7
    g: float = 9.81
    v_cap: float = 25.0
    a_long_max: float = 8.0
    w_veh: float = 2.0

    def __post_init__(self):
        if not (0 < self.mu_min <= self.mu_max):
            raise FrictionOutOfRange("need 0 < mu_min <= mu_max")
        if self.n_profiles < 1:
            raise ValueError("n_profiles must be >= 1")
        if self.v_cap <= 0:
            raise ValueError("v_cap must be positive")


def _forward_backward(v_lat: np.ndarray, ds: np.ndarray, a_max: float, closed: bool, max_sweeps: int = 50):
    v = v_lat.copy()
    n = len(v)
    for _ in range(max_sweeps):
        before = v.copy()
        if closed:
            for i in range(n):
                j = (i + 1) % n
                v[j] = min(v[j], math.sqrt(v[i] ** 2 + 2.0 * a_max * ds[i]))
            for i in range(n - 1, -1, -1):
                j = (i + 1) % n
                v[i] = min(v[i], math.sqrt(v[j] ** 2 + 2.0 * a_max * ds[i]))
        else:
            for i in range(n - 1):
                v[i + 1] = min(v[i + 1], math.sqrt(v[i] ** 2 + 2.0 * a_max * ds[i]))
            for i in range(n - 2, -1, -1):
                v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + 2.0 * a_max * ds[i]))
        if np.max(np.abs(v - before)) <= 1e-12:
            break
    return v


def velocity_profile(raceline: RaceLine, cfg: VelocityProfileConfig, mu: float):
    """Friction-limited speed profile along ``raceline``; returns ``(v_x, a_x)``.

    Lateral cap ``min(v_cap, sqrt(mu*g/|kappa|))`` followed by forward
    (acceleration) and backward (braking) passes, both limited by
    ``a_long_max`` and repeated until nothing changes.
    """
    if not (cfg.mu_min - 1e-12 <= mu <= cfg.mu_max + 1e-12):
        raise FrictionOutOfRange(f"mu={mu} outside [{cfg.mu_min}, {cfg.mu_max}]")
    closed = raceline.closed
    n = len(raceline.s) - 1 if closed else len(raceline.s)
    kappa = np.abs(raceline.kappa[:n])
    with np.errstate(divide="ignore"):
        v_lat = np.minimum(cfg.v_cap, np.sqrt(mu * cfg.g / kappa))
    ds = np.diff(raceline.s)
    v = _forward_backward(v_lat, ds, cfg.a_long_max, closed)
    if closed:
        v_next = np.roll(v, -1)
        a = (v_next**2 - v**2) / (2.0 * ds)
        return np.append(v, v[0]), np.append(a, a[0])
    a = np.empty(n)
    a[:-1] = (v[1:] ** 2 - v[:-1] ** 2) / (2.0 * ds)
    a[-1] = a[-2] if n > 1 else 0.0
    return v, a


@dataclass(frozen=True)
class ProfileLibrary:
    """Speed profiles for evenly spaced friction values."""

    mus: np.ndarray
    v_x: np.ndarray  # (n_profiles, n_samples)
    a_x: np.ndarray
    cfg: VelocityProfileConfig

    def lookup(self, mu: float):
        """Linearly interpolated ``(v_x, a_x)`` for friction ``mu``."""
        if not (self.cfg.mu_min - 1e-12 <= mu <= self.cfg.mu_max + 1e-12):
            raise FrictionOutOfRange(f"mu={mu} outside [{self.cfg.mu_min}, {self.cfg.mu_max}]")
        if len(self.mus) == 1:
            return self.v_x[0].copy(), self.a_x[0].copy()
        pos = (mu - self.mus[0]) / (self.mus[1] - self.mus[0])
        lo = int(np.clip(math.floor(pos), 0, len(self.mus) - 2))
        frac = min(max(pos - lo, 0.0), 1.0)
        if frac == 0.0:
            return self.v_x[lo].copy(), self.a_x[lo].copy()
        v = (1.0 - frac) * self.v_x[lo] + frac * self.v_x[lo + 1]
        a = (1.0 - frac) * self.a_x[lo] + frac * self.a_x[lo + 1]
        return v, a


def profile_library(raceline: RaceLine, cfg: VelocityProfileConfig) -> ProfileLibrary:
    mus = np.linspace(cfg.mu_min, cfg.mu_max, cfg.n_profiles)
    profiles = [velocity_profile(raceline, cfg, float(m)) for m in mus]
    return ProfileLibrary(
        mus=mus,
        v_x=np.array([p[0] for p in profiles]),
        a_x=np.array([p[1] for p in profiles]),
        cfg=cfg,
    )


def read_track_csv(path) -> list[tuple[float, float, float]]:
    """Read ``x,y,w`` rows (header required)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        if reader.fieldnames is None or not {"x", "y", "w"} <= set(reader.fieldnames):
            raise DegenerateGeometry(f"{path}: expected header x,y,w")
        return [(float(r["x"]), float(r["y"]), float(r["w"])) for r in reader]


def load_track(path, closed: bool) -> Track:
    return build_track(read_track_csv(path), closed=closed)


def write_raceline_csv(path, raceline: RaceLine, header_comment: Optional[str] = None) -> None:
    if raceline.v_x is None:
        raise ValueError("raceline has no velocity profile")
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(RACELINE_COLUMNS)
        cols = [raceline.x, raceline.y, raceline.s, raceline.v_x, raceline.a_x, raceline.psi, raceline.kappa, raceline.eta]
        for row in zip(*cols):
            writer.writerow([repr(float(v)) for v in row])


def read_raceline_csv(path, track: Track) -> RaceLine:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(row for row in fh if not row.startswith("#")))
    cols = {c: np.array([float(r[c]) for r in rows]) for c in RACELINE_COLUMNS}
    if len(rows) != len(track.s):
        raise DegenerateGeometry("raceline and track sample counts differ")
    return RaceLine(
        x=cols["x"], y=cols["y"], s=cols["s"], psi=cols["psi"], kappa=cols["kappa"], eta=cols["eta"],
        p_x=track.s.copy(), closed=track.closed, v_x=cols["v_x"], a_x=cols["a_x"],
    )


def default_track_path() -> Path:
    return Path(__file__).with_name("data") / "track.csv"
