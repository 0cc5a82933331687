"""Propagation, hard RF pulses, NV-mediated polarization and polarization readout.

States are either state vectors (1-D) or density matrices (2-D). Times are in
ms, Hamiltonians in rad/ms (see :mod:`nv2dnmr.hamiltonian`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from .hamiltonian import (
    I2,
    NV_MINUS,
    NV_PLUS,
    SX,
    SY,
    SZ,
    TWO_PI,
    field_frame,
    is_hermitian,
    kron_all,
)
from .spins import CouplingSet, SpinSystem

Axis = Literal["x", "y", "z"]


class NonHermitianError(ValueError):
    pass


class Propagator:
    """exp(-i H t) through a cached eigendecomposition of ``H``.

    Decomposing once lets a whole time grid reuse the same eigenvectors; each
    new time only rescales the eigenphases.
    """

    def __init__(self, h: np.ndarray, atol: float = 1e-9):
        h = np.asarray(h, dtype=complex)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ValueError("Hamiltonian must be square")
        scale = max(1.0, float(np.max(np.abs(h), initial=0.0)))
        if not is_hermitian(h, atol * scale):
            raise NonHermitianError("Hamiltonian is not Hermitian")
        self.h = h
        self.energies, self.vectors = np.linalg.eigh(h)

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    def phases(self, t: float) -> np.ndarray:
        return np.exp(-1j * self.energies * t)

    def unitary(self, t: float) -> np.ndarray:
        v = self.vectors
        return (v * self.phases(t)) @ v.conj().T

    def apply(self, state: np.ndarray, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError("evolution time must be >= 0")
        state = np.asarray(state, dtype=complex)
        if state.shape[0] != self.dim:
            raise ValueError(f"state dimension {state.shape[0]} != Hamiltonian dimension {self.dim}")
        if t == 0:
            return state.copy()
        v = self.vectors
        ph = self.phases(t)
        if state.ndim == 1:
            return v @ (ph * (v.conj().T @ state))
        rho = v.conj().T @ state @ v
        rho = ph[:, None] * rho * ph.conj()[None, :]
        return v @ rho @ v.conj().T


def evolve(state: np.ndarray, h: np.ndarray, t: float) -> np.ndarray:
    """|psi> -> U|psi> or rho -> U rho U^dagger with U = exp(-i H t)."""
    return Propagator(h).apply(state, t)


def expectation(state: np.ndarray, op: np.ndarray) -> float:
    if state.ndim == 1:
        return float(np.real(np.vdot(state, op @ state)))
    return float(np.real(np.trace(op @ state)))


def as_density(state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=complex)
    return np.outer(state, state.conj()) if state.ndim == 1 else state


@dataclass(frozen=True)
class PulseSpec:
    """Hard rotation ``exp(-i angle sum_{i in target} s_i^axis)`` of the selected nuclei.

    ``target`` is a species label, a collection of labels, or None for every
    nucleus. Axes refer to the field frame (z along B).
    """

    target: str | tuple[str, ...] | None
    axis: Axis
    angle: float

    def __post_init__(self):
        if self.axis not in ("x", "y", "z"):
            raise ValueError("pulse axis must be x, y or z")
        if not -2 * np.pi < self.angle <= 2 * np.pi:
            raise ValueError("pulse angle must lie in (-2pi, 2pi]")


def _rotation_2x2(axis_vec: np.ndarray, angle: float) -> np.ndarray:
    s = axis_vec[0] * SX + axis_vec[1] * SY + axis_vec[2] * SZ
    # exp(-i angle s) for spin-1/2, with (2s)^2 = 1
    return np.cos(angle / 2) * I2 - 2j * np.sin(angle / 2) * s


def pulse_unitary(
    system: SpinSystem,
    pulse: PulseSpec,
    direction,
    *,
    include_nv: bool = True,
) -> np.ndarray:
    frame = field_frame(direction)
    axis_vec = frame["xyz".index(pulse.axis)]
    rot = _rotation_2x2(axis_vec, pulse.angle)
    targets = set(system.indices(pulse.target))
    factors = [I2] if include_nv else []
    factors += [rot if i in targets else I2 for i in range(len(system))]
    return kron_all(factors)


def apply_pulse(
    state: np.ndarray,
    pulse: PulseSpec,
    system: SpinSystem,
    direction=(0.0, 0.0, 1.0),
    *,
    include_nv: bool = True,
) -> np.ndarray:
    """Instantaneous rotation of the targeted nuclei; the NV factor is untouched."""
    if not system.indices(pulse.target):
        warnings.warn(f"pulse target {pulse.target!r} selects no nuclei; pulse skipped", stacklevel=2)
        return np.asarray(state, dtype=complex).copy()
    u = pulse_unitary(system, pulse, direction, include_nv=include_nv)
    state = np.asarray(state, dtype=complex)
    if state.ndim == 1:
        return u @ state
    return u @ state @ u.conj().T


def partial_trace_nv(rho: np.ndarray) -> np.ndarray:
    """Trace out site 0 (the NV) of a full-space density matrix."""
    d = rho.shape[0] // 2
    r = rho.reshape(2, d, 2, d)
    return r[0, :, 0, :] + r[1, :, 1, :]


def with_nv(nv_state: np.ndarray, rho_nuc: np.ndarray) -> np.ndarray:
    return np.kron(as_density(nv_state), as_density(rho_nuc))


def reset_nv(rho: np.ndarray, nv_state: np.ndarray = NV_PLUS) -> np.ndarray:
    """Ideal projective re-initialization of the NV, nuclei untouched."""
    return with_nv(nv_state, partial_trace_nv(as_density(rho)))


def polarize(
    rho: np.ndarray,
    h_int: np.ndarray,
    tau_p: float,
    cycles: int,
    nv_state: np.ndarray = NV_PLUS,
) -> np.ndarray:
    """Repeated (reset NV, evolve ``tau_p``) cycles under the Hartmann-Hahn Hamiltonian."""
    if cycles < 0:
        raise ValueError("cycles must be >= 0")
    rho = as_density(rho)
    if cycles == 0:
        return rho.copy()
    prop = Propagator(h_int)
    for _ in range(cycles):
        rho = prop.apply(reset_nv(rho, nv_state), tau_p)
    return rho


def readout_observable(h_int: np.ndarray, tau: float) -> np.ndarray:
    """Nuclear operator M with Tr[M rho_nuc] = P^+_- - P^-_+ for readout time ``tau``.

    This is the Heisenberg-picture form of the two propagations behind
    :func:`measure_dp`; it lets a protocol evaluate the readout on many nuclear
    states without re-propagating the NV.
    """
    u = Propagator(h_int).unitary(tau)
    d = u.shape[0] // 2
    # U |nv> (x) 1 as a (2, d, d) block: rows NV out, nuclear out; cols nuclear in
    u4 = u.reshape(2, d, 2, d)

    def transfer(nv_in, nv_out):
        # <nv_out| U |nv_in> as a nuclear operator
        a = np.einsum("i,iajb,j->ab", nv_out.conj(), u4, nv_in)
        return a.conj().T @ a

    return transfer(NV_MINUS, NV_PLUS) - transfer(NV_PLUS, NV_MINUS)


@dataclass(frozen=True)
class ReadoutResult:
    value: float
    approx: float
    valid: bool


def perturbative_load(g_perp: Iterable[float], tau: float) -> float:
    """2 tau^2 sum (2 pi g_perp)^2 of the selected nuclei."""
    g = np.asarray(list(g_perp), dtype=float)
    return float(2.0 * tau**2 * np.sum((TWO_PI * g) ** 2))


def measure_dp_approx(
    rho_nuc: np.ndarray,
    couplings: CouplingSet,
    tau: float,
    sites: Iterable[int] | None = None,
    direction=(0.0, 0.0, 1.0),
) -> float:
    """Perturbative readout 2 tau^2 sum_i (2 pi g_perp_i)^2 <s_i^z>."""
    rho = as_density(rho_nuc)
    n = int(np.log2(rho.shape[0]))
    sites = range(n) if sites is None else list(sites)
    zvec = field_frame(direction)[2]
    total = 0.0
    for i in sites:
        op = kron_all([I2] * i + [zvec[0] * SX + zvec[1] * SY + zvec[2] * SZ] + [I2] * (n - i - 1))
        total += (TWO_PI * couplings.g_perp[i]) ** 2 * expectation(rho, op)
    return float(2.0 * tau**2 * total)


def measure_dp(
    rho_nuc: np.ndarray,
    h_int: np.ndarray,
    tau: float,
    couplings: CouplingSet | None = None,
    sites: Iterable[int] | None = None,
    direction=(0.0, 0.0, 1.0),
    max_load: float = 1.0,
) -> ReadoutResult:
    """Exact NV population difference P^+_- - P^-_+ after a readout window ``tau``.

    ``P^nu_mu`` is the probability of finding the NV in ``|nu>`` after starting
    in ``|mu>``. Both propagations are carried out explicitly. When
    ``couplings`` is given, the perturbative value and its validity flag
    (``2 tau^2 sum (2pi g_perp)^2 <= max_load``) are attached.
    """
    rho = as_density(rho_nuc)
    prop = Propagator(h_int)
    d = rho.shape[0]
    if prop.dim != 2 * d:
        raise ValueError("nuclear state does not match the interaction Hamiltonian")
    proj_plus = np.kron(np.outer(NV_PLUS, NV_PLUS.conj()), np.eye(d))
    proj_minus = np.kron(np.outer(NV_MINUS, NV_MINUS.conj()), np.eye(d))
    p_minus_to_plus = expectation(prop.apply(with_nv(NV_MINUS, rho), tau), proj_plus)
    p_plus_to_minus = expectation(prop.apply(with_nv(NV_PLUS, rho), tau), proj_minus)
    value = p_minus_to_plus - p_plus_to_minus
    if couplings is None:
        return ReadoutResult(value, float("nan"), True)
    chosen = range(d.bit_length() - 1) if sites is None else list(sites)
    approx = measure_dp_approx(rho, couplings, tau, chosen, direction)
    load = perturbative_load(couplings.g_perp[list(chosen)], tau)
    valid = load <= max_load
    if not valid:
        warnings.warn(
            f"readout outside perturbative regime: 2 tau^2 sum(2pi g_perp)^2 = {load:.3g} > {max_load}",
            stacklevel=2,
        )
    return ReadoutResult(value, approx, valid)


TRANSVERSE_ROTATION = {
    # rotation that carries the requested transverse component onto +z
    "x": ("y", -np.pi / 2),
    "y": ("x", np.pi / 2),
}


def measure_transverse(
    rho_nuc: np.ndarray,
    axis: Literal["x", "y"],
    system: SpinSystem,
    h_int: np.ndarray,
    tau: float,
    target=None,
    direction=(0.0, 0.0, 1.0),
    couplings: CouplingSet | None = None,
) -> ReadoutResult:
    """Rotate the ``axis`` component of the targeted nuclei onto z, then :func:`measure_dp`."""
    rot_axis, angle = TRANSVERSE_ROTATION[axis]
    rotated = apply_pulse(
        as_density(rho_nuc), PulseSpec(target, rot_axis, angle), system, direction, include_nv=False
    )
    sites = system.indices(target) if couplings is not None else None
    return measure_dp(rotated, h_int, tau, couplings, sites, direction)


def nv_population(rho: np.ndarray, nv_state: np.ndarray) -> float:
    """Probability of finding the NV (site 0) in ``nv_state``."""
    rho = as_density(rho)
    d = rho.shape[0] // 2
    proj = np.kron(np.outer(nv_state, nv_state.conj()), np.eye(d))
    return expectation(rho, proj)


def nuclear_sz(rho_nuc: np.ndarray, site: int, direction=(0.0, 0.0, 1.0)) -> float:
    rho = as_density(rho_nuc)
    n = int(np.log2(rho.shape[0]))
    z = field_frame(direction)[2]
    op = kron_all([I2] * site + [z[0] * SX + z[1] * SY + z[2] * SZ] + [I2] * (n - site - 1))
    return expectation(rho, op)


def flip_flop_time(g_perp: float) -> float:
    """Time (ms) for complete NV-nucleus exchange at resonance: sin^2(2 pi g t) = 1."""
    return 1.0 / (4.0 * g_perp)

