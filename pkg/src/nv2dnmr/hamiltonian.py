"""Dense Hamiltonians over the NV (two-level) x nuclear spin-1/2 Hilbert space.

Site 0 is the NV whenever it is included, spanned by ``|m=-1>`` (index 0) and
``|m=0>`` (index 1). Nuclear sites follow in system order. Matrices are
returned in angular units, rad/ms (2 pi x kHz), so ``exp(-1j * H * t)`` takes
``t`` in ms.
"""

from __future__ import annotations

from functools import reduce
from typing import Literal

import numpy as np

from .spins import CouplingSet, FieldConfig, SpinSystem

TWO_PI = 2.0 * np.pi
MAX_NUCLEI = 9

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 0.5], [0.5, 0]], dtype=complex)
SY = np.array([[0, -0.5j], [0.5j, 0]], dtype=complex)
SZ = np.array([[0.5, 0], [0, -0.5]], dtype=complex)
SPLUS = SX + 1j * SY
SMINUS = SX - 1j * SY

PAULI_X = 2 * SX
PAULI_Z = 2 * SZ
NV_PLUS = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2)
NV_MINUS = np.array([1.0, -1.0], dtype=complex) / np.sqrt(2)
NV_M1 = np.array([1.0, 0.0], dtype=complex)
NV_M0 = np.array([0.0, 1.0], dtype=complex)
# raising operator in the sigma_x eigenbasis: |+><-|
SIGMA_X_PLUS = np.outer(NV_PLUS, NV_MINUS.conj())

GparOperator = Literal["identity", "sigma_x", "sigma_z"]
_GPAR_OPS = {"identity": I2, "sigma_x": PAULI_X, "sigma_z": PAULI_Z}


class DimensionError(ValueError):
    pass


def embed(op: np.ndarray, site: int, n_sites: int) -> np.ndarray:
    """Place a 2x2 operator on ``site`` of an ``n_sites`` qubit register."""
    if not 0 <= site < n_sites:
        raise IndexError(f"site {site} out of range for {n_sites} sites")
    op = np.asarray(op, dtype=complex)
    if op.shape != (2, 2):
        raise DimensionError("embed expects a 2x2 operator")
    left = np.eye(2**site, dtype=complex)
    right = np.eye(2 ** (n_sites - site - 1), dtype=complex)
    return np.kron(np.kron(left, op), right)


def kron_all(ops) -> np.ndarray:
    return reduce(np.kron, ops)


def field_frame(direction) -> np.ndarray:
    """Rows e1, e2, b of a right-handed frame whose third axis is ``direction``."""
    b = np.asarray(direction, dtype=float)
    b = b / np.linalg.norm(b)
    ref = np.array([1.0, 0.0, 0.0]) if abs(b[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ b) * b
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(b, e1)
    return np.array([e1, e2, b])


def spin_along(vec, site: int, n_sites: int) -> np.ndarray:
    """s . vec on ``site``."""
    vx, vy, vz = vec
    return embed(vx * SX + vy * SY + vz * SZ, site, n_sites)


def frame_ops(frame: np.ndarray, site: int, n_sites: int):
    """(s_x, s_y, s_z, s_+, s_-) of one spin, expressed in ``frame``."""
    sx = spin_along(frame[0], site, n_sites)
    sy = spin_along(frame[1], site, n_sites)
    sz = spin_along(frame[2], site, n_sites)
    return sx, sy, sz, sx + 1j * sy, sx - 1j * sy


def is_hermitian(h: np.ndarray, atol: float = 1e-12) -> bool:
    return bool(np.max(np.abs(h - h.conj().T), initial=0.0) <= atol)


def _check_couplings(system: SpinSystem, couplings: CouplingSet) -> None:
    n = len(system)
    if n > MAX_NUCLEI:
        raise DimensionError(f"dense model supports at most {MAX_NUCLEI} nuclei, got {n}")
    if (
        couplings.g_par.shape != (n,)
        or couplings.g_perp.shape != (n,)
        or couplings.g_ij.shape != (n, n)
    ):
        raise DimensionError("coupling set does not match the number of nuclei")


def interaction_frequencies(
    system: SpinSystem,
    field: FieldConfig,
    target_species: str,
    rabi: float | None = None,
) -> tuple[float, np.ndarray]:
    """Frame frequencies (omega_nv, omega_i per nucleus) in kHz for a drive tuned to ``target_species``.

    The RF carrier sits at ``f_rf = |gamma_t| B - Delta_p``. Every nucleus sees its
    offset from that carrier dressed by ``Omega_p``, so the target species ends up
    at ``omega_f`` and other species stay detuned by their Larmor difference.
    """
    targets = system.indices(target_species)
    if not targets:
        raise ValueError(f"no nucleus of species {target_species!r} in the system")
    gamma_t = system.nuclei[targets[0]].gamma
    f_rf = field.larmor(gamma_t) - field.rf_detuning
    if rabi is None:
        rabi = field.larmor(gamma_t) - field.rf_detuning + field.omega_f
    omega_nv = rabi - f_rf
    offsets = np.array([field.larmor(n.gamma) - f_rf for n in system.nuclei])
    sign = np.where(offsets < 0, -1.0, 1.0)
    omega_i = sign * np.hypot(offsets, field.rf_strength)
    return float(omega_nv), omega_i


def build_interaction_h(
    system: SpinSystem,
    couplings: CouplingSet,
    field: FieldConfig,
    target_species: str | None = None,
    *,
    rabi: float | None = None,
    gpar_operator: GparOperator = "sigma_x",
) -> np.ndarray:
    """Driven NV-nuclei Hamiltonian on the full NV x nuclei space.

    ``H = w_nv/2 sigma_x + sum_i w_i s_i^z + sum_i g_par_i O s_i^z
    + sum_i g_perp_i (sigma_x^+ s_i^- + h.c.)``, where ``O`` is chosen by
    ``gpar_operator``. Nuclear operators are taken in the field frame.
    """
    _check_couplings(system, couplings)
    if gpar_operator not in _GPAR_OPS:
        raise ValueError(f"gpar_operator must be one of {sorted(_GPAR_OPS)}")
    if target_species is None:
        target_species = system.nuclei[0].species
    omega_nv, omega_i = interaction_frequencies(system, field, target_species, rabi)
    n_sites = len(system) + 1
    frame = field_frame(field.direction)

    h = 0.5 * omega_nv * embed(PAULI_X, 0, n_sites)
    sig_plus = embed(SIGMA_X_PLUS, 0, n_sites)
    sig_minus = sig_plus.conj().T
    gpar_op = embed(_GPAR_OPS[gpar_operator], 0, n_sites)
    for i in range(len(system)):
        _, _, sz, sp, sm = frame_ops(frame, i + 1, n_sites)
        h = h + omega_i[i] * sz
        if couplings.g_par[i]:
            h = h + couplings.g_par[i] * (gpar_op @ sz)
        if couplings.g_perp[i]:
            h = h + couplings.g_perp[i] * (sig_plus @ sm + sig_minus @ sp)
    return TWO_PI * h


def build_free_h(
    system: SpinSystem,
    field: FieldConfig,
    couplings: CouplingSet | None = None,
    *,
    include_nv: bool = True,
) -> np.ndarray:
    """Zeeman plus full (non-secular) dipole-dipole Hamiltonian of the nuclei.

    With ``include_nv`` the operator acts as identity on the NV factor.
    """
    if couplings is None:
        from .spins import compute_couplings

        couplings = compute_couplings(system, field.direction)
    _check_couplings(system, couplings)
    n_nuc = len(system)
    offset = 1 if include_nv else 0
    n_sites = n_nuc + offset
    dim = 2**n_sites
    bvec = field.direction * field.tesla * 1e3  # T, scaled so gamma[MHz/T] gives kHz

    def ops(i):
        return [embed(s, i + offset, n_sites) for s in (SX, SY, SZ)]

    h = np.zeros((dim, dim), dtype=complex)
    cache = [ops(i) for i in range(n_nuc)]
    for i, nuc in enumerate(system.nuclei):
        for a in range(3):
            if bvec[a]:
                h += nuc.gamma * bvec[a] * cache[i][a]
    for i in range(n_nuc):
        for j in range(i + 1, n_nuc):
            g = couplings.g_ij[i, j]
            if not g:
                continue
            r = couplings.r_hat_ij[i, j]
            dot = sum(cache[i][a] @ cache[j][a] for a in range(3))
            ri = sum(r[a] * cache[i][a] for a in range(3) if r[a])
            rj = sum(r[a] * cache[j][a] for a in range(3) if r[a])
            h += g * (dot - 3.0 * (ri @ rj))
    return TWO_PI * h


def total_spin(system_size: int, direction, *, include_nv: bool = True) -> np.ndarray:
    """Sum of nuclear s . direction."""
    offset = 1 if include_nv else 0
    n_sites = system_size + offset
    return sum(spin_along(direction, i + offset, n_sites) for i in range(system_size))
