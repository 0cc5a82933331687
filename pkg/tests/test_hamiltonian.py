import itertools

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from nv2dnmr.dynamics import Propagator
from nv2dnmr.hamiltonian import (
    MAX_NUCLEI,
    NV_MINUS,
    NV_PLUS,
    SZ,
    DimensionError,
    build_free_h,
    build_interaction_h,
    embed,
    interaction_frequencies,
    is_hermitian,
    kron_all,
    spin_along,
    total_spin,
)
from nv2dnmr.spins import CouplingSet, FieldConfig, compute_couplings, dipolar_constant, hartmann_hahn_rabi

from conftest import TILT, make_system

TWO_PI = 2 * np.pi


def herm_err(h):
    return np.max(np.abs(h - h.conj().T)) / max(np.max(np.abs(h)), 1.0)


def test_embed_identity_and_dimension():
    assert np.array_equal(embed(np.eye(2), 1, 3), np.eye(8))
    with pytest.raises(IndexError):
        embed(SZ, 3, 3)
    with pytest.raises(DimensionError):
        embed(np.eye(4), 0, 3)


def test_spin_along_matches_kron():
    op = spin_along([0, 0, 1.0], 1, 2)
    np.testing.assert_array_equal(op, np.kron(np.eye(2), SZ))


def zero_couplings(n):
    return CouplingSet(np.zeros(n), np.zeros(n), np.zeros((n, n)), np.zeros((n, n, 3)))


def test_noninteracting_spectrum():
    system = make_system(("1H", (0, 0, 0)), ("15N", (1.5, 0.2, 0)))
    fld = FieldConfig.decoupled(1000.0, 200.0, TILT)
    h = build_interaction_h(system, zero_couplings(2), fld, "1H")
    w_nv, w = interaction_frequencies(system, fld, "1H")
    expected = sorted(
        s0 * w_nv / 2 + s1 * w[0] / 2 + s2 * w[1] / 2 for s0, s1, s2 in itertools.product((1, -1), repeat=3)
    )
    np.testing.assert_allclose(np.linalg.eigvalsh(h) / TWO_PI, expected, atol=1e-9)


def test_target_species_sits_at_omega_f():
    system = make_system(("1H", (0, 0, 0)), ("15N", (1.5, 0.2, 0)))
    fld = FieldConfig.decoupled(1000.0, 200.0, TILT)
    w_nv, w = interaction_frequencies(system, fld, "15N")
    assert w[1] == pytest.approx(fld.omega_f, rel=1e-12)
    assert w_nv == pytest.approx(fld.omega_f, rel=1e-12)
    # the other species is detuned by the Larmor difference
    assert abs(w[0]) > 3000


def rabi_two_level(g, detuning, t):
    """Closed-form transfer |-, up> -> |+, down> for coupling g and energy mismatch detuning (kHz)."""
    om = TWO_PI * g
    de = TWO_PI * detuning
    eff = np.sqrt(om**2 + de**2 / 4)
    return om**2 / eff**2 * np.sin(eff * t) ** 2


@pytest.mark.parametrize("mismatch", [0.0, 3.0])
def test_single_nucleus_flip_flop_matches_closed_form(mismatch):
    system = make_system(("1H", (6.0, 0.0, 0.0)))
    fld = FieldConfig.decoupled(1000.0, 200.0, [0, 0, 1.0])
    g = 5.0
    c = CouplingSet(np.zeros(1), np.array([g]), np.zeros((1, 1)), np.zeros((1, 1, 3)))
    rabi = hartmann_hahn_rabi(fld, system.nuclei[0].gamma) + mismatch
    w_nv, w = interaction_frequencies(system, fld, "1H", rabi)
    assert w_nv - w[0] == pytest.approx(mismatch, abs=1e-9)
    h = build_interaction_h(system, c, fld, "1H", rabi=rabi)
    prop = Propagator(h)
    psi0 = np.kron(NV_MINUS, [1.0, 0.0])
    target = np.kron(NV_PLUS, [0.0, 1.0])
    for t in np.linspace(0, 0.2, 9):
        p = abs(np.vdot(target, prop.apply(psi0, t))) ** 2
        assert p == pytest.approx(rabi_two_level(g, mismatch, t), abs=1e-10)


def test_single_nucleus_zeeman_gap():
    system = make_system(("1H", (3.0, 1.0, 0.0)))
    fld = FieldConfig(1000.0, TILT)
    ev = np.linalg.eigvalsh(build_free_h(system, fld, include_nv=False)) / TWO_PI
    assert ev[1] - ev[0] == pytest.approx(fld.larmor(42.577478518), rel=1e-12)


def test_two_like_nuclei_closed_form():
    # field along the pair axis: the dipolar term is already secular and
    # the 4x4 block has eigenvalues {gB - d/2, -gB - d/2, d, 0}
    r = 1.7
    system = make_system(("1H", (0, 0, 0)), ("1H", (0, 0, r)), axis=[0, 0, 1.0])
    fld = FieldConfig(1000.0, [0, 0, 1.0])
    d = dipolar_constant(*system.nuclei)
    gb = 42.577478518 * 0.1 * 1e3
    expected = sorted([gb - d / 2, -gb - d / 2, d, 0.0])
    ev = np.linalg.eigvalsh(build_free_h(system, fld, include_nv=False)) / TWO_PI
    np.testing.assert_allclose(ev, expected, atol=1e-8)


def test_free_h_acts_trivially_on_nv():
    system = make_system(("1H", (0, 0, 0)), ("31P", (2.0, 0, 0)))
    fld = FieldConfig(1000.0, TILT)
    h_nuc = build_free_h(system, fld, include_nv=False)
    h_full = build_free_h(system, fld, include_nv=True)
    np.testing.assert_allclose(h_full, np.kron(np.eye(2), h_nuc), atol=1e-12)


def test_total_spin_commutes_with_secular_free_h():
    system = make_system(("1H", (0, 0, 0)), ("1H", (0, 0, 1.5)), axis=[0, 0, 1.0])
    fld = FieldConfig(1000.0, [0, 0, 1.0])
    h = build_free_h(system, fld, include_nv=False)
    s = total_spin(2, [0, 0, 1.0], include_nv=False)
    assert np.max(np.abs(h @ s - s @ h)) < 1e-9


def test_too_many_nuclei():
    nuclei = [("1H", (2.0 * i, 0, 0)) for i in range(MAX_NUCLEI + 1)]
    system = make_system(*nuclei, nv_pos=(0, 0, -30.0))
    with pytest.raises(DimensionError):
        build_free_h(system, FieldConfig(1000.0))


def test_bad_gpar_operator(hp_system, hp_field):
    c = compute_couplings(hp_system, hp_field.direction)
    with pytest.raises(ValueError):
        build_interaction_h(hp_system, c, hp_field, "1H", gpar_operator="sigma_y")


def test_kron_all_order():
    a, b = np.diag([1.0, 2.0]), np.diag([1.0, 3.0])
    np.testing.assert_array_equal(kron_all([a, b]), np.kron(a, b))


coords = st.tuples(*[st.floats(-4, 4)] * 3)
unit = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1)


@given(p1=coords, p2=coords, bdir=unit, op=st.sampled_from(["identity", "sigma_x", "sigma_z"]))
def test_hamiltonians_hermitian(p1, p2, bdir, op):
    assume(min(np.linalg.norm(np.subtract(p1, p2)), np.linalg.norm(p1), np.linalg.norm(p2)) > 0.5)
    system = make_system(("1H", (0, 0, 0)), ("1H", p1), ("15N", p2))
    fld = FieldConfig.decoupled(500.0, 100.0, np.asarray(bdir) / np.linalg.norm(bdir))
    c = compute_couplings(system, fld.direction)
    for species in ("1H", "15N"):
        h = build_interaction_h(system, c, fld, species, gpar_operator=op)
        assert herm_err(h) <= 1e-12
        assert is_hermitian(h, 1e-12 * np.max(np.abs(h)))
    assert herm_err(build_free_h(system, fld, c)) <= 1e-12
