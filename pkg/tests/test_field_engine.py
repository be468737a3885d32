from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohmchsh import spin_analytic as sa
from bohmchsh.field_engine import (
    BoundaryError,
    Collapse,
    Drift,
    EmptyBranchError,
    GridSpec,
    Kick,
    PhysParams,
    Readout,
    StageSchedule,
    bimodality_residue,
    check_boundary,
    collapse,
    drift,
    evolve_schedule,
    init_state,
    kick,
    marginal_density,
    momentum_expectation,
    one_apparatus_schedule,
    position_moments,
    recombine_stage,
    reduced_spin_density,
    single_split_schedule,
    spin_position_entanglement,
)

from .conftest import SMALL_GRID, SMALL_PHYS

TINY = GridSpec(64, 8.0)
DEFAULT_ANGLES = tuple(math.radians(a) for a in (90, 0, 45, 135))


def _split(f, p, theta_a=0.0, theta_b=0.0):
    return evolve_schedule(f, single_split_schedule(theta_a, theta_b, p), p)


def _momentum_fft(f, side):
    # independent of momentum_expectation: full 2-D transform, sum over spins
    spec = np.fft.fft2(f.psi, axes=(2, 3))
    w = (np.abs(spec) ** 2).sum(axis=(0, 1))
    k = 2 * np.pi * np.fft.fftfreq(f.grid.n_points, f.grid.spacing)
    kk = k[:, None] if side == "A" else k[None, :]
    return float(np.sum(w * kk) / np.sum(w))


class TestValidation:
    def test_grid_power_of_two(self):
        with pytest.raises(ValueError):
            GridSpec(100, 10)
        with pytest.raises(ValueError):
            GridSpec(32, 10)

    def test_params(self):
        with pytest.raises(ValueError):
            PhysParams(substeps=8)
        with pytest.raises(ValueError, match="distinguishable"):
            PhysParams(dp=0.5)

    def test_coarse_grid(self):
        with pytest.raises(ValueError, match="coarse"):
            init_state(GridSpec(64, 40.0), PhysParams(), sa.singlet())

    def test_schedule_drift_boundaries_must_match(self):
        with pytest.raises(ValueError):
            StageSchedule([Drift(1.0)], [Drift(2.0)])
        with pytest.raises(ValueError):
            StageSchedule([Drift(1.0), Drift(1.0)], [Drift(2.0)])

    def test_readout_follows_drift(self):
        with pytest.raises(ValueError):
            StageSchedule([Kick("A", 0, 1), Readout("A", "A"), Drift(1.0)], [Drift(1.0)])

    def test_event_side(self):
        with pytest.raises(ValueError):
            StageSchedule([Kick("B", 0, 1), Drift(1.0)], [Drift(1.0)])

    def test_one_apparatus_timeline(self):
        s = one_apparatus_schedule(DEFAULT_ANGLES, SMALL_PHYS)
        assert s.readouts() == ["A", "B", "A'", "B'"]
        assert s.duration == pytest.approx(3 * SMALL_PHYS.drift_T)
        times = s.readout_times()
        assert times["A"] == times["B"] == pytest.approx(2.0)
        assert times["A'"] == times["B'"] == pytest.approx(6.0)
        per_side = sum(1 for ev in s.side_a if isinstance(ev, (Kick, Drift)))
        assert per_side >= 7

    def test_recombine_events(self):
        ev = recombine_stage("A", sa.Direction(0.3), SMALL_PHYS)
        assert [type(e) for e in ev] == [Kick, Drift, Kick]
        assert ev[0].impulse == -2 * SMALL_PHYS.dp and ev[2].impulse == SMALL_PHYS.dp


class TestInitState:
    def test_norm(self, singlet_field):
        assert singlet_field.norm == pytest.approx(1.0, abs=1e-12)

    def test_gaussian_marginal(self, singlet_field):
        y = SMALL_GRID.y
        want = np.exp(-y ** 2 / 2) / math.sqrt(2 * math.pi)
        for side in "AB":
            m = marginal_density(singlet_field, side)
            assert np.max(np.abs(m - want)) / want.max() < 1e-9
            assert m.max() == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-2)
            assert m.sum() * SMALL_GRID.spacing == pytest.approx(1.0, abs=1e-9)

    def test_reduced_spin_is_singlet_projector(self, singlet_field):
        s = sa.singlet().amplitudes
        np.testing.assert_allclose(reduced_spin_density(singlet_field), np.outer(s, s.conj()), atol=1e-12)
        assert spin_position_entanglement(singlet_field, sa.singlet()) == pytest.approx(1.0, abs=1e-12)

    def test_grid_has_no_point_on_midline(self):
        assert np.min(np.abs(SMALL_GRID.y)) == pytest.approx(SMALL_GRID.spacing / 2)


class TestKick:
    @pytest.mark.parametrize("theta", [0.0, math.pi / 4, 1.234])
    def test_momentum_shift_spin_up(self, theta):
        f = init_state(SMALL_GRID, SMALL_PHYS, sa.product_state(theta, 0.0))
        g = kick(f, "A", sa.Direction(theta), SMALL_PHYS.dp)
        assert _momentum_fft(f, "A") == pytest.approx(0.0, abs=1e-10)
        assert _momentum_fft(g, "A") == pytest.approx(SMALL_PHYS.dp, abs=1e-9)
        assert momentum_expectation(g, "A") == pytest.approx(SMALL_PHYS.dp, abs=1e-9)
        assert _momentum_fft(g, "B") == pytest.approx(0.0, abs=1e-10)

    def test_spin_down_goes_the_other_way(self):
        f = init_state(SMALL_GRID, SMALL_PHYS, sa.product_state(0.0, math.pi))
        g = kick(f, "B", sa.Direction(0.0), SMALL_PHYS.dp)
        assert _momentum_fft(g, "B") == pytest.approx(-SMALL_PHYS.dp, abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 2 * math.pi), st.floats(-6, 6), st.sampled_from("AB"))
    def test_unitary_and_inverse(self, theta, impulse, side):
        f = init_state(TINY, SMALL_PHYS, sa.singlet())
        g = kick(f, side, theta, impulse)
        assert g.norm == pytest.approx(1.0, abs=1e-12)
        back = kick(g, side, theta, -impulse)
        np.testing.assert_allclose(back.psi, f.psi, atol=1e-12)


class TestDrift:
    def test_snapshots(self, singlet_field):
        snaps = drift(singlet_field, 2.0, 16)
        assert len(snaps) == 17
        assert [s.t for s in snaps] == pytest.approx(np.linspace(0, 2, 17))
        for s in snaps:
            assert s.norm == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("t", [0.5, 2.0, 5.0])
    def test_free_width(self, singlet_field, t):
        g = drift(singlet_field, t, 16)[-1]
        for side in "AB":
            mean, width = position_moments(g, side)
            assert mean == pytest.approx(0.0, abs=1e-12)
            assert width == pytest.approx(SMALL_PHYS.width(t), abs=1e-6)
        assert SMALL_PHYS.width(t) == pytest.approx(math.sqrt(1 + (t / 2) ** 2))

    def test_momentum_invariant(self, singlet_field):
        f = kick(singlet_field, "A", 0.0, 3.0)
        f = kick(f, "B", 1.0, 2.0)
        g = drift(f, 1.5, 16)[-1]
        for side in "AB":
            assert momentum_expectation(g, side) == pytest.approx(momentum_expectation(f, side), abs=1e-12)

    def test_composition(self, singlet_field):
        f = kick(singlet_field, "A", 0.3, 2.0)
        once = drift(f, 1.7, 16)[-1]
        twice = drift(drift(f, 0.6, 16)[-1], 1.1, 16)[-1]
        np.testing.assert_allclose(twice.psi, once.psi, atol=1e-12)
        assert twice.t == pytest.approx(once.t)

    def test_boundary_error(self):
        f = init_state(TINY, SMALL_PHYS, sa.singlet())
        f = kick(f, "A", 0.0, 5.0)
        with pytest.raises(BoundaryError, match="edge"):
            drift(f, 2.0, 16)

    def test_check_boundary_quiet_for_centered_packet(self, singlet_field):
        assert check_boundary(singlet_field) < 1e-20

    def test_frozen_side_does_not_move(self, singlet_field):
        f = kick(singlet_field, "A", 0.0, SMALL_PHYS.dp)
        f = kick(f, "B", 0.0, SMALL_PHYS.dp)
        frozen = f.with_frozen("A")
        g = drift(frozen, 2.0, 16)[-1]
        h = drift(f, 2.0, 16)[-1]
        np.testing.assert_allclose(marginal_density(g, "A"), marginal_density(f, "A"), atol=1e-12)
        assert position_moments(g, "B")[1] == pytest.approx(position_moments(h, "B")[1], abs=1e-9)
        assert g.norm == pytest.approx(1.0, abs=1e-12)
        both = drift(f.with_frozen("A").with_frozen("B"), 1.0, 16)[-1]
        np.testing.assert_array_equal(both.psi, f.psi)

    def test_frozen_side_ignores_kicks(self, singlet_field, small_phys):
        f = singlet_field.with_frozen("A")
        s = StageSchedule([Kick("A", 0.0, 5.0), Drift(1.0, 16)], [Drift(1.0, 16)])
        g = evolve_schedule(f, s, small_phys)
        np.testing.assert_allclose(g.psi, drift(f, 1.0, 16)[-1].psi, atol=1e-14)


class TestSplitAndRecombine:
    def test_beam_correspondence(self, small_phys):
        theta = 0.7
        f = init_state(SMALL_GRID, small_phys, sa.product_state(theta, theta))
        g = _split(f, small_phys, theta, theta)
        y = SMALL_GRID.y
        for side in "AB":
            m = marginal_density(g, side)
            assert m[y >= 0].sum() * SMALL_GRID.spacing >= 0.999

    def test_singlet_lobes(self, singlet_field, small_phys):
        g = _split(singlet_field, small_phys, math.pi / 2, math.pi / 4)
        y = SMALL_GRID.y
        for side in "AB":
            m = marginal_density(g, side)
            dy = SMALL_GRID.spacing
            assert m.sum() * dy == pytest.approx(1.0, abs=1e-9)
            assert m[y >= 0].sum() * dy == pytest.approx(0.5, abs=1e-3)
            assert m[y < 0].sum() * dy == pytest.approx(0.5, abs=1e-3)
            assert bimodality_residue(m, SMALL_GRID) > 0.99

    def test_split_decoheres_spin(self, singlet_field, small_phys):
        g = _split(singlet_field, small_phys, 0.0, 0.0)
        assert spin_position_entanglement(g, sa.singlet()) == pytest.approx(0.5, abs=1e-3)

    @pytest.mark.parametrize("theta", [0.0, math.pi / 2, 2.2])
    def test_round_trip(self, singlet_field, small_phys, theta):
        p = small_phys
        side = lambda name: [Kick(name, theta, p.dp), Drift(p.drift_T, p.substeps),
                             *recombine_stage(name, theta, p)]
        g = evolve_schedule(singlet_field, StageSchedule(side("A"), side("B")), p)
        assert spin_position_entanglement(g, sa.singlet()) >= 0.999
        for s in "AB":
            assert bimodality_residue(marginal_density(g, s), SMALL_GRID) <= 1e-3
        assert g.norm == pytest.approx(1.0, abs=1e-10)

    def test_full_schedule_norm(self, singlet_field, small_phys):
        norms = []
        g = evolve_schedule(singlet_field, one_apparatus_schedule(DEFAULT_ANGLES, small_phys), small_phys,
                            on_snapshot=lambda s: norms.append(s.norm))
        assert len(norms) == 3 * 17
        assert max(abs(n - 1) for n in norms) < 1e-10
        assert g.norm == pytest.approx(1.0, abs=1e-10)


@pytest.fixture(scope="module")
def split(singlet_field):
    return _split(singlet_field, SMALL_PHYS, 0.0, 0.0)


class TestCollapse:
    def test_half_mass(self, split):
        _, kept = collapse(split, "A", +1)
        assert kept == pytest.approx(0.5, abs=2e-3)

    def test_idempotent(self, split):
        g, _ = collapse(split, "B", -1)
        assert g.norm == pytest.approx(1.0, abs=1e-12)
        _, again = collapse(g, "B", -1)
        assert again == pytest.approx(1.0, abs=1e-12)

    def test_complementary(self, split):
        _, up = collapse(split, "A", +1)
        _, down = collapse(split, "A", -1)
        assert up + down == pytest.approx(1.0, abs=1e-12)

    def test_marginal_consistency(self, split):
        g, kept = collapse(split, "A", +1)
        rho = split.density()
        y = SMALL_GRID.y
        restricted = np.where((y >= 0)[:, None], rho, 0.0) / kept
        dy = SMALL_GRID.spacing
        for axis, side in ((1, "A"), (0, "B")):
            np.testing.assert_allclose(marginal_density(g, side), restricted.sum(axis=axis) * dy, atol=1e-9)

    def test_collapse_event(self, split, small_phys):
        s = StageSchedule([Collapse("A", -1), Drift(0.5, 16)], [Drift(0.5, 16)])
        g = evolve_schedule(split, s, small_phys)
        assert g.norm == pytest.approx(1.0, abs=1e-12)

    def test_empty_branch(self, singlet_field):
        f = init_state(SMALL_GRID, SMALL_PHYS, sa.product_state(0.0, 0.0))
        g = drift(kick(f, "A", 0.0, SMALL_PHYS.dp), 2.0, 16)[-1]
        g, _ = collapse(g, "A", +1)
        with pytest.raises(EmptyBranchError):
            collapse(g, "A", -1)

    def test_bad_sign(self, singlet_field):
        with pytest.raises(ValueError):
            collapse(singlet_field, "A", 0)
        with pytest.raises(ValueError):
            collapse(singlet_field, "C", 1)
