"""Two-particle spinor wavefunction on a periodic (y_A, y_B) grid.

Stern-Gerlach magnets are impulsive spin-dependent momentum kicks; flight
between magnets is the exact free propagator applied in momentum space.
Units: hbar = m = 1 unless overridden in :class:`PhysParams`.

Amplitudes are stored with shape ``(2, 2, n, n)`` indexed
``[s_A, s_B, i_A, i_B]`` so that the spatial FFTs run over contiguous axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Sequence, Union

import numpy as np
from scipy import fft as sfft

from .spin_analytic import Direction, TwoQubitState, spin_component, _theta

SIDES = ("A", "B")
EDGE_CELLS = 5
EDGE_MASS_TOL = 1e-6


class BoundaryError(RuntimeError):
    """Probability mass reached the periodic wrap-around band."""


class EmptyBranchError(RuntimeError):
    """Collapse onto a half-plane that carries (almost) no probability."""


def _side_axis(side: str) -> int:
    if side not in SIDES:
        raise ValueError(f"side must be 'A' or 'B', got {side!r}")
    return SIDES.index(side)


@dataclass(frozen=True)
class GridSpec:
    n_points: int = 512
    half_extent: float = 40.0

    def __post_init__(self):
        n = self.n_points
        if n < 64 or n & (n - 1):
            raise ValueError(f"n_points must be a power of two >= 64, got {n}")
        if self.half_extent <= 0:
            raise ValueError("half_extent must be positive")

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_extent / self.n_points

    @property
    def y(self) -> np.ndarray:
        # cell centred: no grid point sits on the y = 0 midline
        return -self.half_extent + (np.arange(self.n_points) + 0.5) * self.spacing

    @property
    def k(self) -> np.ndarray:
        return 2.0 * np.pi * sfft.fftfreq(self.n_points, d=self.spacing)


@dataclass(frozen=True)
class PhysParams:
    sigma0: float = 1.0
    dp: float = 5.0
    drift_T: float = 2.0
    substeps: int = 64
    hbar: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        if self.substeps < 16:
            raise ValueError(f"substeps must be >= 16, got {self.substeps}")
        sep = 2.0 * self.dp * self.drift_T / self.mass
        width = self.width(self.drift_T)
        if sep < 8.0 * width:
            raise ValueError(
                f"beams not distinguishable: separation {sep:.4g} < 8 sigma(T) = {8 * width:.4g}"
            )

    def width(self, t: float) -> float:
        """Free Gaussian width sigma0 * sqrt(1 + (hbar t / 2 m sigma0^2)^2)."""
        s0 = self.sigma0
        return s0 * math.sqrt(1.0 + (self.hbar * t / (2.0 * self.mass * s0 * s0)) ** 2)


# --- schedule events -------------------------------------------------------

@dataclass(frozen=True)
class Kick:
    side: str
    theta: float
    impulse: float


@dataclass(frozen=True)
class Drift:
    duration: float
    substeps: int = 64


@dataclass(frozen=True)
class Collapse:
    side: str
    sign: int


@dataclass(frozen=True)
class Readout:
    side: str
    label: str


StageEvent = Union[Kick, Drift, Collapse, Readout]


@dataclass(frozen=True)
class StageSchedule:
    """Per-side event lists merged into one global timeline.

    Drifts act on both particles at once, so the two sides must agree on
    drift boundaries; instantaneous events between drifts keep their per-side
    order (all of side A's first, then side B's).
    """

    side_a: tuple
    side_b: tuple
    timeline: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "side_a", tuple(self.side_a))
        object.__setattr__(self, "side_b", tuple(self.side_b))
        object.__setattr__(self, "timeline", self._merge())

    @staticmethod
    def _segments(events, side):
        segs, current, drifts = [], [], []
        prev = None
        for ev in events:
            if isinstance(ev, Drift):
                if ev.duration <= 0:
                    raise ValueError("drift duration must be positive")
                segs.append(current)
                drifts.append(ev)
                current = []
            else:
                if ev.side != side:
                    raise ValueError(f"event {ev} listed under side {side}")
                if isinstance(ev, Readout) and not isinstance(prev, (Drift, Readout)):
                    raise ValueError(f"readout {ev.label} must follow a drift")
                current.append(ev)
            prev = ev
        segs.append(current)
        return segs, drifts

    def _merge(self):
        segs_a, drifts_a = self._segments(self.side_a, "A")
        segs_b, drifts_b = self._segments(self.side_b, "B")
        if len(drifts_a) != len(drifts_b) or any(
            abs(da.duration - db.duration) > 1e-12 for da, db in zip(drifts_a, drifts_b)
        ):
            raise ValueError("side schedules must share drift boundaries and end at the same time")
        timeline = []
        for i, (sa, sb) in enumerate(zip(segs_a, segs_b)):
            timeline.extend(sa)
            timeline.extend(sb)
            if i < len(drifts_a):
                timeline.append(replace(drifts_a[i], substeps=max(drifts_a[i].substeps, drifts_b[i].substeps)))
        return tuple(timeline)

    @property
    def duration(self) -> float:
        return sum(ev.duration for ev in self.timeline if isinstance(ev, Drift))

    def readouts(self) -> list[str]:
        return [ev.label for ev in self.timeline if isinstance(ev, Readout)]

    def readout_times(self) -> dict[str, float]:
        t, out = 0.0, {}
        for ev in self.timeline:
            if isinstance(ev, Drift):
                t += ev.duration
            elif isinstance(ev, Readout):
                out[ev.label] = t
        return out


def recombine_stage(side: str, d, p: PhysParams) -> list:
    """Reverse a prior Kick(d, +dp) + Drift(T): arms swap, re-overlap and stop."""
    th = _theta(d)
    return [
        Kick(side, th, -2.0 * p.dp),
        Drift(p.drift_T, p.substeps),
        Kick(side, th, p.dp),
    ]


def single_split_schedule(theta_a: float, theta_b: float, p: PhysParams,
                          labels=("A", "B")) -> StageSchedule:
    side_a = [Kick("A", theta_a, p.dp), Drift(p.drift_T, p.substeps), Readout("A", labels[0])]
    side_b = [Kick("B", theta_b, p.dp), Drift(p.drift_T, p.substeps), Readout("B", labels[1])]
    return StageSchedule(side_a, side_b)


def one_apparatus_schedule(angles: Sequence[float], p: PhysParams) -> StageSchedule:
    """Split along a, recombine, split along a' (and likewise b, b')."""
    a, ap, b, bp = angles

    def side(name, first, second):
        return [
            Kick(name, first, p.dp),
            Drift(p.drift_T, p.substeps),
            Readout(name, name),
            *recombine_stage(name, first, p),
            Kick(name, second, p.dp),
            Drift(p.drift_T, p.substeps),
            Readout(name, name + "'"),
        ]

    return StageSchedule(side("A", a, ap), side("B", b, bp))


# --- field -----------------------------------------------------------------

@dataclass(frozen=True)
class SpinorField:
    psi: np.ndarray
    grid: GridSpec
    t: float = 0.0
    frozen: frozenset = frozenset()

    def __post_init__(self):
        n = self.grid.n_points
        if self.psi.shape != (2, 2, n, n):
            raise ValueError(f"psi must have shape (2, 2, {n}, {n}), got {self.psi.shape}")
        self.psi.setflags(write=False)

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.psi) ** 2) * self.grid.spacing ** 2)

    def density(self) -> np.ndarray:
        """Configuration-space density rho(y_A, y_B) summed over spins."""
        return np.einsum("abij,abij->ij", self.psi, self.psi.conj()).real

    def evolve(self, **changes) -> "SpinorField":
        return replace(self, **changes)

    def with_frozen(self, side: str) -> "SpinorField":
        _side_axis(side)
        return replace(self, frozen=self.frozen | {side})


def gaussian_amplitude(y: np.ndarray, sigma0: float) -> np.ndarray:
    """Real amplitude whose square is the normal density N(0, sigma0^2)."""
    return (2.0 * np.pi * sigma0 ** 2) ** -0.25 * np.exp(-(y ** 2) / (4.0 * sigma0 ** 2))


def init_state(grid: GridSpec, p: PhysParams, spin: TwoQubitState) -> SpinorField:
    if grid.spacing > p.sigma0 / 4.0:
        raise ValueError(
            f"grid too coarse: spacing {grid.spacing:.4g} > sigma0/4 = {p.sigma0 / 4:.4g}"
        )
    g = gaussian_amplitude(grid.y, p.sigma0)
    spatial = np.outer(g, g)
    spin_m = spin.as_matrix() if isinstance(spin, TwoQubitState) else np.asarray(spin).reshape(2, 2)
    psi = spin_m[:, :, None, None] * spatial[None, None]
    psi = psi / math.sqrt(np.sum(np.abs(psi) ** 2) * grid.spacing ** 2)
    return SpinorField(psi, grid, 0.0)


def _apply_side_matrix(psi: np.ndarray, side: str, U: np.ndarray) -> np.ndarray:
    # U has shape (2, 2, n): a spin matrix for every grid point on `side`
    if side == "A":
        return np.einsum("xan,abnm->xbnm", U, psi)
    return np.einsum("xbm,abnm->axnm", U, psi)


def kick(f: SpinorField, side: str, d, impulse: float, hbar: float = 1.0) -> SpinorField:
    """Multiply each sigma_d eigencomponent by exp(i s impulse y / hbar).

    Since sigma_d squares to one this is cos(phi) I + i sin(phi) sigma_d with
    phi = impulse y / hbar, applied pointwise along ``side``.
    """
    _side_axis(side)
    phi = impulse * f.grid.y / hbar
    sd = spin_component(d)
    U = np.cos(phi)[None, None, :] * np.eye(2)[:, :, None] + 1j * np.sin(phi)[None, None, :] * sd[:, :, None]
    return f.evolve(psi=_apply_side_matrix(f.psi, side, U))


class _FreePropagator:
    """Exact kinetic propagator from one stage-start field.

    Frozen (screened) sides do not evolve, so transforms run only over the
    axes of active sides.
    """

    def __init__(self, f: SpinorField, hbar: float = 1.0, mass: float = 1.0):
        self.f0 = f
        self.hbar = hbar
        self.mass = mass
        self.active = tuple(s for s in SIDES if s not in f.frozen)
        self.axes = tuple(SIDES.index(s) - 2 for s in self.active)
        k = f.grid.k
        ka = k if "A" in self.active else np.zeros_like(k)
        kb = k if "B" in self.active else np.zeros_like(k)
        self.k2 = (hbar / (2.0 * mass)) * (ka[:, None] ** 2 + kb[None, :] ** 2)
        self.spectrum = self._forward(f.psi)

    def _forward(self, psi):
        if not self.axes:
            return psi
        return sfft.fftn(psi, axes=self.axes, workers=-1)

    def _inverse(self, spec, overwrite=False):
        if not self.axes:
            return spec
        return sfft.ifftn(spec, axes=self.axes, workers=-1, overwrite_x=overwrite)

    def phased(self, tau: float) -> np.ndarray:
        return self.spectrum * np.exp(-1j * self.k2 * tau)[None, None]

    def field(self, tau: float) -> SpinorField:
        return self.f0.evolve(psi=self._inverse(self.phased(tau)), t=self.f0.t + tau)

    def field_and_gradients(self, tau: float):
        """(field, d/dy_A psi, d/dy_B psi) at stage time ``tau``.

        The gradient along a frozen side is returned as zeros; nothing moves
        along that axis.
        """
        spec = self.phased(tau)
        k = self.f0.grid.k
        parts = [spec]
        if "A" in self.active:
            parts.append(1j * k[None, None, :, None] * spec)
        if "B" in self.active:
            parts.append(1j * k[None, None, None, :] * spec)
        out = self._inverse(np.stack(parts), overwrite=True)
        psi = out[0]
        d_a = out[1] if "A" in self.active else np.zeros_like(psi)
        d_b = out[-1] if "B" in self.active else np.zeros_like(psi)
        return self.f0.evolve(psi=psi, t=self.f0.t + tau), d_a, d_b


def check_boundary(f: SpinorField, density: np.ndarray | None = None) -> float:
    """Mass inside the EDGE_CELLS-wide band at the periodic seam."""
    rho = f.density() if density is None else density
    band = np.zeros(f.grid.n_points, dtype=bool)
    band[:EDGE_CELLS] = True
    band[-EDGE_CELLS:] = True
    dA = f.grid.spacing
    mass = float(rho[band, :].sum() + rho[~band][:, band].sum()) * dA * dA
    if mass > EDGE_MASS_TOL:
        raise BoundaryError(
            f"mass {mass:.3e} within {EDGE_CELLS} cells of the grid edge at t={f.t:.6f}"
        )
    return mass


def drift(f: SpinorField, duration: float, substeps: int, hbar: float = 1.0,
          mass: float = 1.0, check: bool = True) -> list[SpinorField]:
    """Snapshots at ``substeps + 1`` evenly spaced times, including both ends.

    Every snapshot comes from the stage-start spectrum, so the exactness of
    the propagator does not depend on ``substeps``.
    """
    prop = _FreePropagator(f, hbar, mass)
    snaps = []
    for j in range(substeps + 1):
        g = prop.field(duration * j / substeps)
        if check:
            check_boundary(g)
        snaps.append(g)
    return snaps


def collapse(f: SpinorField, side: str, sign: int) -> tuple[SpinorField, float]:
    """Project onto the half-plane sign(y_side) == sign and renormalize."""
    axis = _side_axis(side)
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    keep = (f.grid.y >= 0) if sign > 0 else (f.grid.y < 0)
    shape = [1, 1, 1, 1]
    shape[2 + axis] = -1
    psi = f.psi * keep.reshape(shape)
    retained = float(np.sum(np.abs(psi) ** 2) * f.grid.spacing ** 2) / f.norm
    if retained < 1e-12:
        raise EmptyBranchError(f"collapse of side {side} onto sign {sign:+d} retains {retained:.3e}")
    psi = psi / math.sqrt(retained * f.norm)
    return f.evolve(psi=psi), retained


def marginal_density(f: SpinorField, side: str) -> np.ndarray:
    """1-D density along ``side`` (integrates to one with spacing dy)."""
    axis = _side_axis(side)
    rho = f.density()
    return rho.sum(axis=1 - axis) * f.grid.spacing


def reduced_spin_density(f: SpinorField) -> np.ndarray:
    """4x4 spin density matrix with both positions traced out."""
    v = f.psi.reshape(4, -1)
    return (v @ v.conj().T) * f.grid.spacing ** 2


def spin_position_entanglement(f: SpinorField, reference: TwoQubitState) -> float:
    """Fidelity <ref| rho_spin |ref> of the reduced spin state with ``reference``."""
    rho = reduced_spin_density(f)
    ref = reference.amplitudes if isinstance(reference, TwoQubitState) else np.asarray(reference)
    return float(np.real(np.vdot(ref, rho @ ref)) / np.real(np.trace(rho)))


def position_moments(f: SpinorField, side: str) -> tuple[float, float]:
    """Mean and standard deviation of the position marginal."""
    m = marginal_density(f, side)
    y = f.grid.y
    dy = f.grid.spacing
    mean = float(np.sum(y * m) * dy)
    var = float(np.sum((y - mean) ** 2 * m) * dy)
    return mean, math.sqrt(var)


def momentum_expectation(f: SpinorField, side: str, hbar: float = 1.0) -> float:
    axis = _side_axis(side)
    spec = sfft.fft(f.psi, axis=2 + axis, workers=-1)
    w = np.abs(spec) ** 2
    shape = [1, 1, 1, 1]
    shape[2 + axis] = -1
    return float(hbar * np.sum(w * f.grid.k.reshape(shape)) / np.sum(w))


def bimodality_residue(density: np.ndarray, grid: GridSpec) -> float:
    """(peak - midline value) / peak; zero for a density peaked at y = 0."""
    n = grid.n_points
    mid = 0.5 * (density[n // 2 - 1] + density[n // 2])
    peak = float(density.max())
    return float((peak - mid) / peak)


def evolve_schedule(f: SpinorField, schedule: StageSchedule, p: PhysParams,
                    on_snapshot: Callable | None = None) -> SpinorField:
    """Run a schedule on the field alone (fixed-sign Collapse events allowed)."""
    for ev in schedule.timeline:
        f = apply_instant(f, ev, p)
        if isinstance(ev, Drift):
            snaps = drift(f, ev.duration, ev.substeps, p.hbar, p.mass)
            if on_snapshot is not None:
                for s in snaps:
                    on_snapshot(s)
            f = snaps[-1]
    return f


def apply_instant(f: SpinorField, ev, p: PhysParams) -> SpinorField:
    """Apply a Kick or fixed-sign Collapse; other events leave ``f`` unchanged."""
    if isinstance(ev, Kick):
        if ev.side in f.frozen:
            return f
        return kick(f, ev.side, ev.theta, ev.impulse, p.hbar)
    if isinstance(ev, Collapse):
        return collapse(f, ev.side, ev.sign)[0]
    return f
