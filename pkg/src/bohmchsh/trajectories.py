"""Bohmian guidance trajectories through a stage schedule.

The ensemble advances in lockstep against one shared sequence of field
snapshots. A screen at a readout collapses the field onto the half-plane the
trajectory actually occupies, so each screen splits the ensemble into at most
two branches, and each branch gets its own field history from that point on.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .field_engine import (
    Collapse,
    Drift,
    GridSpec,
    Kick,
    PhysParams,
    Readout,
    SpinorField,
    StageSchedule,
    _FreePropagator,
    apply_instant,
    check_boundary,
    collapse,
)

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-12  # relative to the grid maximum of rho
STEPS_PER_SNAPSHOT = 4
MIN_PER_BIN = 50


class DegenerateVelocityError(RuntimeError):
    def __init__(self, t, qa, qb):
        super().__init__(f"density below floor at t={t:.6f}, q=({qa:.6f}, {qb:.6f})")
        self.t, self.qa, self.qb = t, qa, qb


@dataclass(frozen=True)
class Configuration:
    qA: float
    qB: float


@dataclass
class Trajectory:
    t: np.ndarray
    qA: np.ndarray
    qB: np.ndarray
    status: dict = field(default_factory=lambda: {"A": "active", "B": "active"})
    degenerate: bool = False


@dataclass(frozen=True)
class StageRecord:
    a: int = 0
    a_prime: int = 0
    b: int = 0
    b_prime: int = 0
    times: dict = field(default_factory=dict)
    degenerate: bool = False

    @property
    def complete(self) -> bool:
        return not self.degenerate and 0 not in (self.a, self.a_prime, self.b, self.b_prime)

    @property
    def combination(self) -> int:
        if not self.complete:
            raise ValueError("combination needs all four values set")
        return self.a * self.b + self.a * self.b_prime + self.a_prime * self.b - self.a_prime * self.b_prime


LABEL_FIELDS = {"A": "a", "A'": "a_prime", "B": "b", "B'": "b_prime"}


@dataclass(frozen=True)
class EnsembleSpec:
    n_samples: int
    seed: int
    stream: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


# --- sampling --------------------------------------------------------------

def _substream_uniforms(seed: int, n: int, stream: int = 0) -> np.ndarray:
    """Two uniforms in (0, 1] per index, keyed on (seed, stream, index)."""
    words = np.empty((n, 2), dtype=np.uint64)
    for i in range(n):
        words[i] = np.random.SeedSequence(seed, spawn_key=(stream, i)).generate_state(2, np.uint64)
    return 1.0 - (words >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def sample_initial(p: PhysParams, n: int, seed: int, stream: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """i.i.d. (qA, qB) ~ N(0, sigma0^2) by Box-Muller, reproducible per index."""
    u = _substream_uniforms(seed, n, stream)
    r = p.sigma0 * np.sqrt(-2.0 * np.log(u[:, 0]))
    phase = 2.0 * np.pi * u[:, 1]
    return r * np.cos(phase), r * np.sin(phase)


def sample_marginal(marginal: np.ndarray, grid: GridSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-transform draws from the piecewise-constant density on grid cells."""
    edges, cdf = _cell_cdf(marginal, grid)
    return np.interp(rng.random(n), cdf, edges)


# --- guidance --------------------------------------------------------------

@dataclass
class GuidanceGrid:
    """rho and the two current components (hbar/m) Im(psi^dag d_i psi) at time t."""

    t: float
    stack: np.ndarray  # (3, n, n): rho, jA, jB
    grid: GridSpec

    @property
    def rho_max(self) -> float:
        return float(self.stack[0].max())


def _guidance_from(psi, d_a, d_b, t, grid, hbar, mass) -> GuidanceGrid:
    stack = np.empty((3, grid.n_points, grid.n_points))
    conj = psi.conj()
    stack[0] = np.einsum("abij,abij->ij", psi, conj).real
    stack[1] = (hbar / mass) * np.einsum("abij,abij->ij", conj, d_a).imag
    stack[2] = (hbar / mass) * np.einsum("abij,abij->ij", conj, d_b).imag
    return GuidanceGrid(t, stack, grid)


def guidance_grid(f: SpinorField, hbar: float = 1.0, mass: float = 1.0) -> GuidanceGrid:
    prop = _FreePropagator(f, hbar, mass)
    g, d_a, d_b = prop.field_and_gradients(0.0)
    return _guidance_from(g.psi, d_a, d_b, f.t, f.grid, hbar, mass)


def _corners(grid: GridSpec, qa, qb):
    n = grid.n_points
    xa = (np.asarray(qa) + grid.half_extent) / grid.spacing - 0.5
    xb = (np.asarray(qb) + grid.half_extent) / grid.spacing - 0.5
    ia = np.clip(np.floor(xa).astype(np.int64), 0, n - 2)
    ib = np.clip(np.floor(xb).astype(np.int64), 0, n - 2)
    fa = np.clip(xa - ia, 0.0, 1.0)
    fb = np.clip(xb - ib, 0.0, 1.0)
    flat = ia * n + ib
    idx = (flat, flat + 1, flat + n, flat + n + 1)
    w = ((1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb)
    return idx, w


def _gather(stack: np.ndarray, idx, w) -> np.ndarray:
    flat = stack.reshape(3, -1)
    out = flat[:, idx[0]] * w[0]
    for i, wi in zip(idx[1:], w[1:]):
        out += flat[:, i] * wi
    return out


def _quotient(vals, floor):
    rho = vals[0]
    bad = rho < floor
    safe = np.where(bad, 1.0, rho)
    va = np.where(bad, 0.0, vals[1] / safe)
    vb = np.where(bad, 0.0, vals[2] / safe)
    return va, vb, bad


def velocity_at(g: GuidanceGrid, qa, qb):
    """Bilinear numerator and denominator, then the quotient; returns (vA, vB, degenerate)."""
    idx, w = _corners(g.grid, qa, qb)
    return _quotient(_gather(g.stack, idx, w), DENSITY_FLOOR * g.rho_max)


def velocity(f, c: Configuration, hbar: float = 1.0, mass: float = 1.0) -> tuple[float, float]:
    g = f if isinstance(f, GuidanceGrid) else guidance_grid(f, hbar, mass)
    va, vb, bad = velocity_at(g, np.array([c.qA]), np.array([c.qB]))
    if bad[0]:
        raise DegenerateVelocityError(g.t, c.qA, c.qB)
    return float(va[0]), float(vb[0])


class SnapshotInterval:
    """Velocity field between snapshots ``nodes[j]`` and ``nodes[j+1]``.

    rho and the currents are interpolated in time separately (Lagrange
    polynomial through all ``nodes``: two for linear, four for cubic) and
    only then divided.
    """

    def __init__(self, nodes: Sequence[GuidanceGrid]):
        self.nodes = list(nodes)
        self.times = np.array([g.t for g in self.nodes])
        self.floors = np.array([DENSITY_FLOOR * g.rho_max for g in self.nodes])
        self.t0, self.t1 = self.times.min(), self.times.max()

    def weights(self, t: float) -> np.ndarray:
        ts = self.times
        w = np.ones(ts.size)
        for i in range(ts.size):
            for k in range(ts.size):
                if k != i:
                    w[i] *= (t - ts[k]) / (ts[i] - ts[k])
        return w

    def __call__(self, t, qa, qb):
        idx, wts = _corners(self.nodes[0].grid, qa, qb)
        if len(self.nodes) == 2:
            w = self.weights(t)
            vals = w[0] * _gather(self.nodes[0].stack, idx, wts) + w[1] * _gather(self.nodes[1].stack, idx, wts)
            return _quotient(vals, w[0] * self.floors[0] + w[1] * self.floors[1])
        # Cubic: a polynomial through rho itself can go negative in the far
        # tails, so the quotient is taken per node and the velocity is what
        # gets interpolated in time. The floor test uses rho linear in time
        # over the bracketing pair.
        w = self.weights(t)
        va = np.zeros(np.shape(qa))
        vb = np.zeros(np.shape(qa))
        bad = np.zeros(np.shape(qa), dtype=bool)
        lo = int(np.searchsorted(self.times, t, side="right")) - 1
        lo = min(max(lo, 0), self.times.size - 2)
        span = self.times[lo + 1] - self.times[lo]
        s = min(max((t - self.times[lo]) / span, 0.0), 1.0)
        rho_lin = np.zeros(np.shape(qa))
        for k, (wk, g) in enumerate(zip(w, self.nodes)):
            vals = _gather(g.stack, idx, wts)
            a, b, bk = _quotient(vals, self.floors[k])
            va += wk * a
            vb += wk * b
            if k == lo:
                rho_lin += (1.0 - s) * vals[0]
            elif k == lo + 1:
                rho_lin += s * vals[0]
                bad |= bk
            if k == lo:
                bad |= bk
        bad |= rho_lin < (1.0 - s) * self.floors[lo] + s * self.floors[lo + 1]
        return np.where(bad, 0.0, va), np.where(bad, 0.0, vb), bad


def _stencil(j: int, nsub: int, order: int) -> range:
    """Snapshot indices used for the interval [j, j+1]."""
    if order == 2 or nsub < 3:
        return range(j, j + 2)
    lo = min(max(j - 1, 0), nsub - 3)
    return range(lo, lo + 4)


# --- integration -----------------------------------------------------------

def advance(qa, qb, t: float, dt: float, vfield: Callable, move_a=True, move_b=True):
    """One classical RK4 step; returns (qa, qb, degenerate_mask).

    ``vfield(t, qa, qb)`` returns (vA, vB, degenerate). Sides with a false
    ``move_*`` mask stay put; trajectories that hit a degenerate evaluation
    in any stage keep their starting position.
    """
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    ma = np.broadcast_to(np.asarray(move_a, dtype=float), qa.shape)
    mb = np.broadcast_to(np.asarray(move_b, dtype=float), qb.shape)

    a1, b1, bad = vfield(t, qa, qb)
    a2, b2, bad2 = vfield(t + 0.5 * dt, qa + 0.5 * dt * ma * a1, qb + 0.5 * dt * mb * b1)
    a3, b3, bad3 = vfield(t + 0.5 * dt, qa + 0.5 * dt * ma * a2, qb + 0.5 * dt * mb * b2)
    a4, b4, bad4 = vfield(t + dt, qa + dt * ma * a3, qb + dt * mb * b3)
    bad = bad | bad2 | bad3 | bad4
    new_a = qa + (dt / 6.0) * ma * (a1 + 2 * a2 + 2 * a3 + a4)
    new_b = qb + (dt / 6.0) * mb * (b1 + 2 * b2 + 2 * b3 + b4)
    return np.where(bad, qa, new_a), np.where(bad, qb, new_b), bad


def sign_of(q) -> np.ndarray:
    """Screen half-plane: +1 for q >= 0, -1 otherwise."""
    return np.where(np.asarray(q) >= 0, 1, -1).astype(np.int8)


# --- ensemble runner -------------------------------------------------------

@dataclass
class Checkpoint:
    """Positions and field marginals of one branch at the end of a drift."""

    t: float
    branch: str
    indices: np.ndarray
    qA: np.ndarray
    qB: np.ndarray
    marginal_A: np.ndarray
    marginal_B: np.ndarray


@dataclass
class EnsembleResult:
    qA0: np.ndarray
    qB0: np.ndarray
    qA: np.ndarray
    qB: np.ndarray
    values: dict  # label -> int8 array, 0 = unset
    readout_time: dict
    degenerate: np.ndarray
    degenerate_events: list
    frozen: dict  # side -> bool array
    checkpoints: list
    norm_drift: float
    max_edge_mass: float
    branches: list
    history_t: np.ndarray | None = None
    history: np.ndarray | None = None  # (n_times, n, 2)

    @property
    def n(self) -> int:
        return self.qA0.size

    @property
    def degenerate_rate(self) -> float:
        return float(self.degenerate.mean())

    def record(self, i: int) -> StageRecord:
        kw = {LABEL_FIELDS[k]: int(v[i]) for k, v in self.values.items() if k in LABEL_FIELDS}
        times = {k: self.readout_time[k] for k, v in self.values.items() if v[i] != 0}
        return StageRecord(times=times, degenerate=bool(self.degenerate[i]), **kw)

    def records(self) -> list[StageRecord]:
        return [self.record(i) for i in range(self.n)]

    def subset(self, start: int, stop: int) -> "EnsembleResult":
        """Trajectories ``start:stop`` as a standalone result (for batched runs)."""
        sl = slice(start, stop)
        cps = []
        for cp in self.checkpoints:
            keep = (cp.indices >= start) & (cp.indices < stop)
            cps.append(Checkpoint(cp.t, cp.branch, cp.indices[keep] - start, cp.qA[keep], cp.qB[keep],
                                  cp.marginal_A, cp.marginal_B))
        return EnsembleResult(
            qA0=self.qA0[sl], qB0=self.qB0[sl], qA=self.qA[sl], qB=self.qB[sl],
            values={k: v[sl] for k, v in self.values.items()},
            readout_time=dict(self.readout_time),
            degenerate=self.degenerate[sl],
            degenerate_events=[(i - start, *rest) for i, *rest in self.degenerate_events if start <= i < stop],
            frozen={k: v[sl] for k, v in self.frozen.items()},
            checkpoints=cps, norm_drift=self.norm_drift, max_edge_mass=self.max_edge_mass,
            branches=self.branches,
            history_t=self.history_t,
            history=None if self.history is None else self.history[:, sl],
        )

    def trajectory(self, i: int) -> Trajectory:
        if self.history is None:
            raise ValueError("ensemble was run without record_history")
        return Trajectory(
            t=self.history_t.copy(),
            qA=self.history[:, i, 0].copy(),
            qB=self.history[:, i, 1].copy(),
            status={s: ("frozen-at-screen" if self.frozen[s][i] else "active") for s in ("A", "B")},
            degenerate=bool(self.degenerate[i]),
        )


@dataclass
class _Branch:
    key: str
    f: SpinorField
    idx: np.ndarray
    retained: float = 1.0


def _history_times(schedule: StageSchedule, steps: int) -> np.ndarray:
    times, t = [0.0], 0.0
    for ev in schedule.timeline:
        if isinstance(ev, Drift):
            for j in range(1, ev.substeps + 1):
                times.append(t + ev.duration * j / ev.substeps)
            t += ev.duration
    return np.array(times)


def run_ensemble(
    schedule: StageSchedule,
    f0: SpinorField,
    qa0,
    qb0,
    p: PhysParams,
    screens: Iterable[str] = (),
    *,
    record_history: bool = False,
    checkpoints: bool = True,
    steps_per_snapshot: int = STEPS_PER_SNAPSHOT,
    interpolation: str = "cubic",
    on_snapshot: Callable | None = None,
) -> EnsembleResult:
    """Integrate every configuration through ``schedule``.

    ``screens`` names the readout labels at which a detection screen sits:
    the readout collapses the field onto the trajectory's half-plane and
    freezes that side. ``on_snapshot(branch, index, t, marginal_A,
    marginal_B)`` sees every field snapshot of every branch.

    ``interpolation`` is the time interpolation of rho and the currents
    between snapshots: "linear" (adjacent pair) or "cubic" (four nodes).
    """
    order = {"linear": 2, "cubic": 4}[interpolation]
    screens = set(screens)
    unknown = screens - set(schedule.readouts())
    if unknown:
        raise ValueError(f"screened labels {sorted(unknown)} are not readouts of the schedule")

    qa = np.array(qa0, dtype=float)
    qb = np.array(qb0, dtype=float)
    n = qa.size
    values = {lab: np.zeros(n, dtype=np.int8) for lab in schedule.readouts()}
    readout_time = {}
    degenerate = np.zeros(n, dtype=bool)
    degenerate_events = []
    frozen = {"A": np.zeros(n, dtype=bool), "B": np.zeros(n, dtype=bool)}
    cps = []
    norm_drift = abs(f0.norm - 1.0)
    max_edge = 0.0
    dy = f0.grid.spacing

    hist_t = _history_times(schedule, steps_per_snapshot) if record_history else None
    hist = np.empty((hist_t.size, n, 2)) if record_history else None
    if record_history:
        hist[0, :, 0], hist[0, :, 1] = qa, qb
    hrow = 0

    branches = [_Branch("", f0, np.arange(n))]
    t_now = f0.t
    snap_counter = {}

    for ev in schedule.timeline:
        if isinstance(ev, (Kick, Collapse)):
            for br in branches:
                br.f = apply_instant(br.f, ev, p)
        elif isinstance(ev, Readout):
            readout_time[ev.label] = t_now
            new_branches = []
            for br in branches:
                if ev.side in br.f.frozen:
                    # screened earlier on this side: the value stays unset
                    new_branches.append(br)
                    continue
                s = sign_of(qa[br.idx] if ev.side == "A" else qb[br.idx])
                values[ev.label][br.idx] = s
                if ev.label not in screens:
                    new_branches.append(br)
                    continue
                frozen[ev.side][br.idx] = True
                for sign in (1, -1):
                    sub = br.idx[s == sign]
                    if sub.size == 0:
                        continue
                    cf, kept = collapse(br.f, ev.side, sign)
                    key = f"{br.key}{ev.label}{'+' if sign > 0 else '-'}"
                    new_branches.append(_Branch(key, cf.with_frozen(ev.side), sub, br.retained * kept))
            branches = new_branches
        elif isinstance(ev, Drift):
            nsub = ev.substeps
            step_dt = ev.duration / (nsub * steps_per_snapshot)
            for br in branches:
                if br.f.frozen >= {"A", "B"}:
                    br.f = br.f.evolve(t=br.f.t + ev.duration)
                    if record_history:
                        hist[hrow + 1:hrow + 1 + nsub, br.idx, 0] = qa[br.idx]
                        hist[hrow + 1:hrow + 1 + nsub, br.idx, 1] = qb[br.idx]
                    continue
                prop = _FreePropagator(br.f, p.hbar, p.mass)
                idx = br.idx
                move_a = "A" not in br.f.frozen
                move_b = "B" not in br.f.frozen
                cache = {}

                def snap(i):
                    nonlocal norm_drift, max_edge
                    if i not in cache:
                        g, fj = _snapshot(prop, ev.duration * i / nsub)
                        norm_drift = max(norm_drift, abs(float(g.stack[0].sum()) * dy * dy - 1.0))
                        max_edge = max(max_edge, check_boundary(fj, g.stack[0]))
                        if on_snapshot is not None:
                            _emit(on_snapshot, snap_counter, br.key, g)
                        cache[i] = (g, fj)
                    return cache[i]

                for j in range(nsub):
                    stencil = _stencil(j, nsub, order)
                    for i in [i for i in cache if i < stencil.start]:
                        del cache[i]
                    interval = SnapshotInterval([snap(i)[0] for i in stencil])
                    t_start = snap(j)[0].t
                    live = ~degenerate[idx]
                    for s in range(steps_per_snapshot):
                        ts = t_start + s * step_dt
                        sub = idx[live]
                        na, nb, bad = advance(qa[sub], qb[sub], ts, step_dt, interval, move_a, move_b)
                        qa[sub], qb[sub] = na, nb
                        if bad.any():
                            for i in sub[bad]:
                                degenerate_events.append((int(i), ts, float(qa[i]), float(qb[i])))
                                logger.warning("degenerate trajectory %d at t=%.6f", i, ts)
                            degenerate[sub[bad]] = True
                            live = ~degenerate[idx]
                    if record_history:
                        hist[hrow + 1 + j, idx, 0] = qa[idx]
                        hist[hrow + 1 + j, idx, 1] = qb[idx]
                prev, prev_field = snap(nsub)
                br.f = prev_field
                if checkpoints:
                    rho = prev.stack[0]
                    cps.append(Checkpoint(
                        t=prev.t, branch=br.key, indices=idx.copy(),
                        qA=qa[idx].copy(), qB=qb[idx].copy(),
                        marginal_A=rho.sum(axis=1) * dy, marginal_B=rho.sum(axis=0) * dy,
                    ))
            t_now += ev.duration
            if record_history:
                hrow += nsub

    return EnsembleResult(
        qA0=np.array(qa0, dtype=float), qB0=np.array(qb0, dtype=float), qA=qa, qB=qb,
        values=values, readout_time=readout_time, degenerate=degenerate,
        degenerate_events=degenerate_events, frozen=frozen, checkpoints=cps,
        norm_drift=norm_drift, max_edge_mass=max_edge,
        branches=[(br.key, br.idx.size, br.retained) for br in branches],
        history_t=hist_t, history=hist,
    )


def _snapshot(prop: _FreePropagator, tau: float):
    fj, d_a, d_b = prop.field_and_gradients(tau)
    return _guidance_from(fj.psi, d_a, d_b, fj.t, fj.grid, prop.hbar, prop.mass), fj


def _emit(cb, counter, key, g: GuidanceGrid):
    i = counter.get(key, 0)
    counter[key] = i + 1
    dy = g.grid.spacing
    rho = g.stack[0]
    cb(key, i, g.t, rho.sum(axis=1) * dy, rho.sum(axis=0) * dy)


def run_trajectory(schedule: StageSchedule, f0: SpinorField, c: Configuration, p: PhysParams,
                   screens: Iterable[str] = ()) -> tuple[Trajectory, StageRecord]:
    res = run_ensemble(schedule, f0, [c.qA], [c.qB], p, screens, record_history=True, checkpoints=False)
    return res.trajectory(0), res.record(0)


# --- equivariance ----------------------------------------------------------

def _cell_cdf(marginal: np.ndarray, grid: GridSpec):
    edges = -grid.half_extent + np.arange(grid.n_points + 1) * grid.spacing
    cdf = np.concatenate([[0.0], np.cumsum(np.clip(marginal, 0.0, None))])
    return edges, cdf / cdf[-1]


def marginal_cdf(marginal: np.ndarray, grid: GridSpec, q) -> np.ndarray:
    edges, cdf = _cell_cdf(marginal, grid)
    return np.interp(q, edges, cdf)


@dataclass(frozen=True)
class EquivarianceResult:
    statistic: float
    p_value: float
    bins: int
    n: int


def chi_square_against_marginal(positions, marginal: np.ndarray, grid: GridSpec,
                                bins: int = 20) -> EquivarianceResult:
    """Chi-square of positions against equal-mass bins of the grid marginal."""
    positions = np.asarray(positions, dtype=float)
    n = positions.size
    if n < MIN_PER_BIN * bins:
        raise ValueError(f"need >= {MIN_PER_BIN * bins} samples for {bins} bins, got {n}")
    edges, cdf = _cell_cdf(marginal, grid)
    inner = np.interp(np.arange(1, bins) / bins, cdf, edges)
    counts = np.bincount(np.searchsorted(inner, positions, side="right"), minlength=bins)
    expected = n / bins
    stat = float(np.sum((counts - expected) ** 2) / expected)
    return EquivarianceResult(stat, float(stats.chi2.sf(stat, bins - 1)), bins, n)


def equivariance_test(positions, f: SpinorField, side: str, bins: int = 20) -> EquivarianceResult:
    from .field_engine import marginal_density

    return chi_square_against_marginal(positions, marginal_density(f, side), f.grid, bins)
