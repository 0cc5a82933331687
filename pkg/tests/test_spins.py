import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nv2dnmr.spins import (
    FieldConfig,
    GeometryError,
    NVSensor,
    Nucleus,
    SpinSystem,
    compute_couplings,
    dipolar_constant,
    dipolar_splitting,
    doublet_splitting,
    hartmann_hahn_rabi,
    nv_hyperfine,
    read_molecule,
    write_molecule,
)

MAGIC = np.arccos(1 / np.sqrt(3))

# Frozen from an independent constant-folding script (40-digit decimals) and an
# independent dipolar-tensor script; neither imports this package.
D_HH_2A = 15.01502014369915571  # kHz, 1H-1H at 2.0 A
G_PAR_BELOW = 19.766093475106018  # kHz, 1H 20 A below the NV on its axis
G_PAR_TILT = 3.984855719246301  # NV axis tilted by the magic angle, 1H at (3, -2, 20) A
G_PERP_TILT = 14.11153621013902


def h(pos):
    return Nucleus("1H", np.asarray(pos, float))


def test_dipolar_constant_matches_oracle():
    assert dipolar_constant(h([0, 0, 0]), h([0, 0, 2.0])) == pytest.approx(D_HH_2A, rel=1e-8)


def test_dipolar_constant_cubic_law_and_symmetry():
    a, b, b2 = h([0, 0, 0]), h([1.3, 0.4, 0.2]), h([2.6, 0.8, 0.4])
    assert dipolar_constant(a, b2) == pytest.approx(dipolar_constant(a, b) / 8, rel=1e-14)
    assert dipolar_constant(a, b) == dipolar_constant(b, a)


def test_coincident_nuclei_rejected():
    with pytest.raises(GeometryError):
        dipolar_constant(h([0, 0, 0]), h([0, 0, 0.05]))


@pytest.mark.parametrize(
    "theta, factor",
    [(0.0, 2.0), (np.pi / 2, -1.0)],
)
def test_dipolar_splitting_limits(theta, factor):
    a, b = h([0, 0, 0]), h([0, 0, 1.8])
    bdir = [np.sin(theta), 0, np.cos(theta)]
    assert dipolar_splitting(a, b, bdir) == pytest.approx(factor * dipolar_constant(a, b), rel=1e-12)


def test_magic_angle_null():
    a, b = h([0, 0, 0]), h([0, 0, 1.8])
    d = dipolar_constant(a, b)
    assert abs(dipolar_splitting(a, b, [np.sin(MAGIC), 0, np.cos(MAGIC)])) < 1e-12 * d


def test_doublet_factor_like_and_unlike():
    bdir = [0, 0, 1.0]
    a, b = h([0, 0, 0]), h([0, 0, 2.0])
    p = Nucleus("31P", np.array([0, 0, 2.0]))
    assert doublet_splitting(a, b, bdir) == pytest.approx(1.5 * dipolar_splitting(a, b, bdir))
    assert doublet_splitting(a, p, bdir) == dipolar_splitting(a, p, bdir)


def test_random_direction_average_vanishes():
    rng = np.random.default_rng(3)
    dirs = rng.standard_normal((200_000, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    c = dirs @ np.array([0.3, -0.5, 0.81]) / np.linalg.norm([0.3, -0.5, 0.81])
    mean = np.mean(3 * c**2 - 1)
    # (3 cos^2 - 1) has standard deviation 2/sqrt(5) over the sphere
    assert abs(mean) < 5 * (2 / np.sqrt(5)) / np.sqrt(dirs.shape[0])


def test_hyperfine_on_axis_matches_oracle():
    nv = NVSensor(np.zeros(3), np.array([0, 0, 1.0]))
    g_par, g_perp = nv_hyperfine(nv, h([0, 0, -20.0]), [0, 0, 1.0])
    assert g_par == pytest.approx(G_PAR_BELOW, rel=1e-8)
    assert abs(g_perp) < 1e-12 * abs(g_par)


def test_hyperfine_tilted_matches_oracle():
    axis = np.array([np.sin(MAGIC), 0, np.cos(MAGIC)])
    nv = NVSensor(np.array([0, 0, -20.0]), axis)
    g_par, g_perp = nv_hyperfine(nv, h([3.0, -2.0, 0.0]), axis)
    assert g_par == pytest.approx(G_PAR_TILT, rel=1e-8)
    assert g_perp == pytest.approx(G_PERP_TILT, rel=1e-8)


def test_hyperfine_cubic_law():
    nv = NVSensor(np.zeros(3))
    axis = [0, 0, 1.0]
    g1 = np.array(nv_hyperfine(nv, h([4.0, 1.0, 9.0]), axis))
    g2 = np.array(nv_hyperfine(nv, h([8.0, 2.0, 18.0]), axis))
    np.testing.assert_allclose(g2, g1 / 8, rtol=1e-13)


def test_nucleus_inside_exclusion_radius():
    with pytest.raises(GeometryError):
        nv_hyperfine(NVSensor(np.zeros(3)), h([0.5, 0, 0]), [0, 0, 1.0])
    with pytest.raises(GeometryError):
        SpinSystem((h([0.2, 0, 0]),), NVSensor(np.zeros(3)))


def test_unknown_species_needs_gamma():
    with pytest.raises(ValueError):
        Nucleus("19F", np.zeros(3))
    assert Nucleus("19F", np.zeros(3), gamma=40.078).gamma == 40.078


def test_hartmann_hahn_bare_limit():
    fld = FieldConfig(1000.0)
    assert hartmann_hahn_rabi(fld, 42.577478518) == pytest.approx(4257.7478518, rel=1e-12)


def test_hartmann_hahn_decoupling_identity():
    delta = 37.0
    fld = FieldConfig(1000.0, rf_detuning=delta, rf_strength=np.sqrt(2) * delta, decoupling=True)
    assert fld.omega_f == pytest.approx(np.sqrt(3) * delta, rel=1e-14)
    gb = fld.larmor(42.577478518)
    assert hartmann_hahn_rabi(fld, 42.577478518) == pytest.approx(gb + (np.sqrt(3) - 1) * delta, rel=1e-14)


def test_decoupling_relation_enforced():
    with pytest.raises(ValueError):
        FieldConfig(1000.0, rf_detuning=10.0, rf_strength=10.0, decoupling=True)


def test_larmor_anchor_hydrogen():
    # 4.2577 MHz at 1000 G; the reported diagonal position 4.24 MHz agrees within 0.5 %
    f = FieldConfig(1000.0).larmor(42.577478518) / 1e3
    assert f == pytest.approx(4.2577, abs=1e-4)
    assert abs(f - 4.24) / f < 0.005


def test_compute_couplings_shapes_and_symmetry():
    nv = NVSensor(np.array([0, 0, -20.0]))
    system = SpinSystem((h([0, 0, 0]), h([1.5, 0, 0]), Nucleus("15N", np.array([0, 1.4, 0.3]))), nv)
    c = compute_couplings(system)
    assert c.g_ij.shape == (3, 3)
    np.testing.assert_array_equal(c.g_ij, c.g_ij.T)
    assert np.all(np.diag(c.g_ij) == 0)
    assert np.all(c.g_perp >= 0)
    np.testing.assert_allclose(c.r_hat_ij[0, 1], -c.r_hat_ij[1, 0])


def test_molecule_round_trip(tmp_path):
    nuclei = [h([0.1, 0.2, 0.3]), Nucleus("15N", np.array([1.0, -2.0, 0.5]))]
    path = tmp_path / "mol.xyz"
    write_molecule(path, nuclei, "test")
    back = read_molecule(path)
    assert [n.species for n in back] == ["1H", "15N"]
    np.testing.assert_allclose([n.position for n in back], [n.position for n in nuclei], atol=1e-6)


def test_molecule_parse_error(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("1H 0 0\n")
    with pytest.raises(ValueError, match="expected"):
        read_molecule(path)


unit = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1)


@given(bdir=unit, axis=unit, r=st.floats(0.8, 6.0))
def test_splitting_bounded_by_constant(bdir, axis, r):
    a = h([0, 0, 0])
    b = h(r * np.asarray(axis) / np.linalg.norm(axis))
    b_hat = np.asarray(bdir) / np.linalg.norm(bdir)
    s = dipolar_splitting(a, b, b_hat)
    d = dipolar_constant(a, b)
    assert -d * (1 + 1e-12) <= s <= 2 * d * (1 + 1e-12)


@given(pos=st.tuples(*[st.floats(-15, 15)] * 3).filter(lambda v: np.linalg.norm(v) > 2), axis=unit)
def test_hyperfine_rotation_invariant_magnitude(pos, axis):
    # |column of the tensor| = sqrt(g_par^2 + g_perp^2) = |d| sqrt(1 + 3 cos^2)
    nv = NVSensor(np.zeros(3))
    z = np.asarray(axis) / np.linalg.norm(axis)
    g_par, g_perp = nv_hyperfine(nv, h(pos), z)
    r = np.linalg.norm(pos)
    c = np.dot(pos, z) / r
    d = abs(nv_hyperfine(nv, h([0, 0, r]), [1.0, 0, 0])[0])  # d (1 - 0) at perpendicular axis
    assert np.hypot(g_par, g_perp) == pytest.approx(d * np.sqrt(1 + 3 * c**2), rel=1e-9)
