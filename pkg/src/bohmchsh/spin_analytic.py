"""Exact two-qubit spin algebra for planar Stern-Gerlach directions.

Directions live in the x-z plane, n(theta) = (sin theta, 0, cos theta), so a
spin component is ``cos(theta) sigma_z + sin(theta) sigma_x``. States are
written in the z basis ordered |uu>, |ud>, |du>, |dd> (side A first).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import optimize

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY = np.eye(2, dtype=complex)

NORM_TOL = 1e-9
TSIRELSON = 2.0 * math.sqrt(2.0)


@dataclass(frozen=True)
class Direction:
    """Magnet direction in the splitting plane, angle in radians."""

    theta: float

    def __post_init__(self):
        th = float(self.theta) % (2.0 * math.pi)
        # a tiny negative angle rounds up to exactly 2 pi
        object.__setattr__(self, "theta", 0.0 if th >= 2.0 * math.pi else th)

    @classmethod
    def from_degrees(cls, deg: float) -> "Direction":
        return cls(math.radians(deg))

    @property
    def unit_vector(self) -> np.ndarray:
        return np.array([math.sin(self.theta), 0.0, math.cos(self.theta)])


def _theta(d) -> float:
    return d.theta if isinstance(d, Direction) else float(d)


@dataclass(frozen=True)
class TwoQubitState:
    amplitudes: np.ndarray

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=complex).reshape(4)
        if abs(np.linalg.norm(amp) - 1.0) > NORM_TOL:
            raise ValueError(f"state not normalized: |psi| = {np.linalg.norm(amp):.12g}")
        amp = amp.copy()
        amp.setflags(write=False)
        object.__setattr__(self, "amplitudes", amp)

    @classmethod
    def normalized(cls, amplitudes) -> "TwoQubitState":
        amp = np.asarray(amplitudes, dtype=complex).reshape(4)
        return cls(amp / np.linalg.norm(amp))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def as_matrix(self) -> np.ndarray:
        """Amplitudes as a (s_A, s_B) 2x2 array."""
        return self.amplitudes.reshape(2, 2)

    def reduced_density(self, side: str = "A") -> np.ndarray:
        m = self.as_matrix()
        if side == "A":
            return m @ m.conj().T
        return m.T @ m.conj()


class ValuationRow(NamedTuple):
    a: int
    a_prime: int
    b: int
    b_prime: int
    combination: int


def _amplitudes(s) -> np.ndarray:
    amp = s.amplitudes if isinstance(s, TwoQubitState) else np.asarray(s, dtype=complex).reshape(4)
    if abs(np.linalg.norm(amp) - 1.0) > NORM_TOL:
        raise ValueError(f"state is not normalized (norm={np.linalg.norm(amp):.12g})")
    return amp


def spin_component(d) -> np.ndarray:
    """Return sigma . n(theta) as a 2x2 Hermitian involution."""
    th = _theta(d)
    return math.cos(th) * SIGMA_Z + math.sin(th) * SIGMA_X


def spin_eigenvectors(d) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvectors of ``spin_component(d)`` for eigenvalues +1 and -1."""
    half = 0.5 * _theta(d)
    up = np.array([math.cos(half), math.sin(half)], dtype=complex)
    down = np.array([-math.sin(half), math.cos(half)], dtype=complex)
    return up, down


def singlet() -> TwoQubitState:
    r = 1.0 / math.sqrt(2.0)
    return TwoQubitState(np.array([0.0, r, -r, 0.0]))


def product_state(theta_a: float = 0.0, theta_b: float = 0.0) -> TwoQubitState:
    """|up along theta_a> (x) |up along theta_b>."""
    ua, _ = spin_eigenvectors(theta_a)
    ub, _ = spin_eigenvectors(theta_b)
    return TwoQubitState(np.kron(ua, ub))


def correlation(s, da, db) -> float:
    amp = _amplitudes(s)
    op = np.kron(spin_component(da), spin_component(db))
    return float(np.real(np.vdot(amp, op @ amp)))


def chsh(s, a, a_prime, b, b_prime) -> float:
    """AB + AB' + A'B - A'B'."""
    return (
        correlation(s, a, b)
        + correlation(s, a, b_prime)
        + correlation(s, a_prime, b)
        - correlation(s, a_prime, b_prime)
    )


def singlet_correlation(theta_a: float, theta_b: float) -> float:
    """Closed form for the singlet: -cos(theta_a - theta_b)."""
    return -math.cos(theta_a - theta_b)


def valuation_table() -> list[ValuationRow]:
    rows = []
    for a, ap, b, bp in itertools.product((1, -1), repeat=4):
        rows.append(ValuationRow(a, ap, b, bp, a * b + a * bp + ap * b - ap * bp))
    return rows


def _planar_correlation_matrix(amp: np.ndarray) -> np.ndarray:
    # T[i, j] = <sigma_i (x) sigma_j>, i, j over (z, x)
    ops = (SIGMA_Z, SIGMA_X)
    return np.array(
        [[np.real(np.vdot(amp, np.kron(oa, ob) @ amp)) for ob in ops] for oa in ops]
    )


def chsh_optimal_angles(s, resolution_deg: float = 1.0, refine: bool = True):
    """Maximize |chsh| over planar angle quadruples.

    The grid search is exhaustive over all four angles at ``resolution_deg``;
    for fixed (b, b') the objective separates into independent maxima over a
    and a', which keeps the full 4-D grid cheap. The best grid point is then
    polished with Nelder-Mead.

    Returns
    -------
    (a, a', b, b') as Directions, and the signed CHSH value at the optimum.
    """
    amp = _amplitudes(s)
    T = _planar_correlation_matrix(amp)
    n_grid = max(1, int(round(360.0 / resolution_deg)))
    grid = np.arange(n_grid) * (2.0 * math.pi / n_grid)
    units = np.stack([np.cos(grid), np.sin(grid)])  # (z, x) components
    E = units.T @ T @ units  # E[a, b]

    best = (-np.inf, None)
    for sign in (1.0, -1.0):
        Es = sign * E
        for ib in range(n_grid):
            plus = Es[:, ib][:, None] + Es  # over (a, b')
            minus = Es[:, ib][:, None] - Es  # over (a', b')
            ia = plus.argmax(axis=0)
            iap = minus.argmax(axis=0)
            total = plus[ia, np.arange(n_grid)] + minus[iap, np.arange(n_grid)]
            ibp = int(total.argmax())
            if total[ibp] > best[0]:
                best = (float(total[ibp]), (sign, int(ia[ibp]), int(iap[ibp]), ib, ibp))

    sign, ia, iap, ib, ibp = best[1]
    x0 = np.array([grid[ia], grid[iap], grid[ib], grid[ibp]])
    if refine:
        res = optimize.minimize(
            lambda x: -sign * chsh(amp, *x),
            x0,
            method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000},
        )
        if -res.fun >= sign * chsh(amp, *x0):
            x0 = res.x
    angles = tuple(Direction(t) for t in x0)
    return angles, chsh(amp, *x0)


def analytic_summary(angles: Sequence[float], state=None) -> dict:
    """Correlators and CHSH value for the given (a, a', b, b') in radians."""
    s = singlet() if state is None else state
    a, ap, b, bp = angles
    pairs = {"ab": (a, b), "ab'": (a, bp), "a'b": (ap, b), "a'b'": (ap, bp)}
    corr = {k: correlation(s, x, y) for k, (x, y) in pairs.items()}
    return {
        "correlators": corr,
        "S": corr["ab"] + corr["ab'"] + corr["a'b"] - corr["a'b'"],
    }
