import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nv2dnmr.dynamics import Propagator, PulseSpec, apply_pulse, measure_transverse
from nv2dnmr.hamiltonian import build_free_h, build_interaction_h
from nv2dnmr.protocols import (
    ConfigurationError,
    CosySettings,
    GridSpec,
    SignalMatrix,
    StrongSettings,
    config_digest,
    cosy_model,
    default_readout_tau,
    free_induction,
    make_mask,
    prepare_polarized,
    run_angle_sweep,
    run_cosy,
    run_strong_coupling,
    sequence_polarization_trace,
)
from nv2dnmr.spins import FieldConfig, compute_couplings

from conftest import make_system

MAGIC = np.arccos(1 / np.sqrt(3))


def test_full_mask():
    assert make_mask(16, 1.0, 0).all()


def test_five_percent_count():
    assert abs(int(make_mask(1024, 0.05, 7).sum()) - 52429) <= 1


@given(n=st.sampled_from([8, 16, 64]), rate=st.floats(0.01, 1.0), seed=st.integers(0, 2**31))
def test_mask_count_and_determinism(n, rate, seed):
    m = make_mask(n, rate, seed)
    assert int(m.sum()) == int(round(rate * n * n))
    assert np.array_equal(m, make_mask(n, rate, seed))


def test_mask_rate_range():
    with pytest.raises(ValueError):
        make_mask(8, 0.0, 0)


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(12, 0.01)
    with pytest.raises(ValueError):
        GridSpec(16, 0.01, np.ones((8, 8), bool))
    assert GridSpec.spanning(16, 0.32).dt == pytest.approx(0.02)


def test_signal_matrix_masks_values():
    mask = np.ones((8, 8), bool)
    mask[0, 0] = False
    s = SignalMatrix(np.ones((8, 8)), 0.1, mask)
    assert np.isnan(s.values[0, 0]) and not s.is_complete
    assert s.observed()[0, 0] == 0
    assert SignalMatrix(np.ones((8, 8)), 0.1, np.ones((8, 8), bool)).is_complete


def test_config_digest_stable():
    a = {"x": np.array([1.0, 2.0]), "y": 3}
    assert config_digest(a) == config_digest({"y": 3, "x": [1.0, 2.0]})
    assert config_digest(a) != config_digest({"y": 4, "x": [1.0, 2.0]})


def test_cosy_engine_matches_step_by_step_propagation(hp_system, hp_field):
    settings = CosySettings(readout_species="1H")
    model = cosy_model(hp_system, hp_field, settings)
    c = compute_couplings(hp_system, hp_field.direction)
    rho = prepare_polarized(hp_system, hp_field, settings, c)
    h_free = Propagator(build_free_h(hp_system, hp_field, c, include_nv=False))
    h_ro = build_interaction_h(hp_system, c, hp_field, "1H")
    tau = default_readout_tau(c.g_perp[[0]])
    pulse = PulseSpec(None, "x", np.pi / 2)
    for t1, t2 in [(0.0, 0.0), (0.013, 0.002), (0.21, 0.37)]:
        r = apply_pulse(rho, pulse, hp_system, hp_field.direction, include_nv=False)
        r = h_free.apply(r, t1)
        r = apply_pulse(r, pulse, hp_system, hp_field.direction, include_nv=False)
        r = h_free.apply(r, t2)
        want = measure_transverse(r, "x", hp_system, h_ro, tau, target="1H", direction=hp_field.direction).value
        assert model.row(t1, np.array([t2]))[0] == pytest.approx(want, abs=1e-12)


def test_masked_run_counts_only_observed_points(hp_system, hp_field):
    mask = make_mask(16, 0.2, 3)
    sig = run_cosy(hp_system, hp_field, GridSpec(16, 0.002, mask), "1H")
    assert sig.evaluations == int(mask.sum())
    assert np.isnan(sig.values[~mask]).all() and np.isfinite(sig.values[mask]).all()


def test_grid_determinism_across_threads(hp_system, hp_field):
    grid = GridSpec(32, 0.002, make_mask(32, 0.5, 1))
    a = run_cosy(hp_system, hp_field, grid, "1H", threads=1)
    b = run_cosy(hp_system, hp_field, grid, "1H", threads=4)
    assert a.values.tobytes() == b.values.tobytes()


def test_full_grid_agrees_with_masked_entries(hp_system, hp_field):
    mask = make_mask(16, 0.3, 2)
    full = run_cosy(hp_system, hp_field, GridSpec(16, 0.002), "1H")
    part = run_cosy(hp_system, hp_field, GridSpec(16, 0.002, mask), "1H")
    np.testing.assert_array_equal(full.values[mask], part.values[mask])


def test_infeasible_resonance_raises_before_propagation(hp_field):
    # 1H on the NV axis: g_perp = 0, no Hartmann-Hahn exchange possible
    system = make_system(("1H", (0, 0, 0)), ("31P", (2.0, 0, 0)), nv_pos=(0, 0, -20.0), axis=[0, 0, 1.0])
    fld = FieldConfig.decoupled(1000.0, 200.0, [0, 0, 1.0])
    with pytest.raises(ConfigurationError, match="impossible"):
        run_cosy(system, fld, GridSpec(8, 0.01), "1H")
    with pytest.raises(ConfigurationError, match="no nucleus"):
        run_cosy(system, fld, GridSpec(8, 0.01), "13C")


def test_hartmann_hahn_mismatch_warns(hp_system, hp_field):
    settings = CosySettings(readout_species="1H", rabi=1000.0)
    with pytest.warns(UserWarning, match="Hartmann-Hahn"):
        cosy_model(hp_system, hp_field, settings)


def fragment():
    from nv2dnmr.presets import ALANINE_FRAGMENT, MAGIC_TILT_AXIS

    system = make_system(*[(s, p) for s, p in ALANINE_FRAGMENT], axis=MAGIC_TILT_AXIS)
    return system, FieldConfig.decoupled(100.0, 20.0, MAGIC_TILT_AXIS)


def test_strong_coupling_without_nv_coupling_is_constant():
    # with g_perp = 0 and a secular term that leaves the NV alone, nothing entangles the NV
    system, fld = fragment()
    settings = StrongSettings("15N", decouple_nv=True, gpar_operator="identity")
    sig = run_strong_coupling(system, fld, GridSpec(8, 1 / 160), settings=settings, track_polarization=False)
    assert np.ptp(sig.values) < 1e-12


def test_secular_sigma_x_term_still_dephases_nv():
    # g_par sigma_x s_z alone imprints nuclear s_z on the NV, so the signal is not flat
    system, fld = fragment()
    settings = StrongSettings("15N", decouple_nv=True)
    sig = run_strong_coupling(system, fld, GridSpec(8, 1 / 160), settings=settings, track_polarization=False)
    assert np.ptp(sig.values) > 1e-3


def test_strong_coupling_keeps_nuclei_unpolarized():
    system, fld = fragment()
    trace = sequence_polarization_trace(system, fld, StrongSettings("15N"), 0.11, 0.37)
    assert np.max(np.abs(trace)) < 0.05


def test_strong_coupling_bad_initial_state():
    system, fld = fragment()
    with pytest.raises(ConfigurationError):
        run_strong_coupling(system, fld, GridSpec(8, 0.01), settings=StrongSettings("15N", nv_initial="zero"))


def two_h():
    return make_system(("1H", (0, 0, 0)), ("1H", (1.5, 0, 0)), axis=[0, 0, 1.0])


def test_free_induction_single_spin_precesses_at_larmor():
    system = make_system(("1H", (0, 0, 0)), axis=[0, 0, 1.0])
    fld = FieldConfig(1000.0, [0, 0, 1.0])
    t = np.arange(64) * 1e-5
    sig = free_induction(system, fld, t)
    f = fld.larmor(42.577478518)
    assert abs(sig[0]) == pytest.approx(0.5, abs=1e-12)
    phase = np.unwrap(np.angle(sig))
    assert abs(np.polyfit(t, phase, 1)[0]) / (2 * np.pi) == pytest.approx(f, rel=1e-9)


def test_angle_sweep_parallel_vs_perpendicular():
    pts = run_angle_sweep(two_h(), 1000.0, [[1.0, 0, 0], [0, 0, 1.0]], n=1024, total_time=2.048)
    par, perp = pts
    assert par.resolved and perp.resolved
    # magnitude ratio 2:1; the signed -2:1 ratio is checked on dipolar_splitting
    assert abs(par.splitting - 2 * perp.splitting) <= 2 * par.resolution
    assert abs(par.splitting - par.expected) <= par.resolution


def test_angle_sweep_magic_angle_unresolved():
    d = [np.cos(MAGIC), 0, np.sin(MAGIC)]
    (pt,) = run_angle_sweep(two_h(), 1000.0, [d], n=1024, total_time=2.048)
    assert not pt.resolved
    assert pt.expected < pt.resolution


def test_angle_sweep_needs_two_nuclei():
    system = make_system(("1H", (0, 0, 0)))
    with pytest.raises(ConfigurationError):
        run_angle_sweep(system, 1000.0, [[0, 0, 1.0]])


@pytest.mark.parametrize("decouple, lo, hi", [(True, 0.0, 1e-2), (False, 0.3, np.inf)])
def test_exchange_needs_internuclear_coupling(hp_system, hp_field, decouple, lo, hi):
    # t1 spectrum of the 1H readout: the 31P line appears only through g_ij
    from nv2dnmr.spectra import alias_fold

    settings = CosySettings(readout_species="1H", decouple_nuclei=decouple)
    sig = run_cosy(hp_system, hp_field, GridSpec(64, 1 / 200), settings=settings)
    w = np.hanning(64)
    spec = np.abs(np.fft.fft(sig.values * w[:, None], axis=0)).sum(axis=1)
    k_p = int(round(alias_fold(hp_field.larmor(17.2351), 200.0) / (200.0 / 64)))
    k_h = int(round(alias_fold(hp_field.larmor(42.577478518), 200.0) / (200.0 / 64)))
    ratio = spec[k_p - 1 : k_p + 2].max() / spec[k_h - 1 : k_h + 2].max()
    assert lo <= ratio <= hi
