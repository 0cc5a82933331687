"""Experiment drivers: NV-detected COSY, the strong-coupling sequence, and the angle sweep.

Both 2D sequences share one structure: prepare a state, evolve freely for t1,
apply a fixed mixing unitary, evolve freely for t2, and read out a fixed
observable. :class:`TwoTimeModel` captures that structure once. The free
Hamiltonian is diagonalized once, and every grid point then costs two
diagonal phase rescalings plus a contraction.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import (
    Propagator,
    PulseSpec,
    as_density,
    flip_flop_time,
    partial_trace_nv,
    polarize,
    pulse_unitary,
    readout_observable,
    TRANSVERSE_ROTATION,
)
from .hamiltonian import (
    NV_M1,
    NV_PLUS,
    SX,
    SY,
    SZ,
    build_free_h,
    build_interaction_h,
    embed,
    field_frame,
    interaction_frequencies,
    spin_along,
)
from .spins import (
    CouplingSet,
    FieldConfig,
    SpinSystem,
    compute_couplings,
    doublet_splitting,
)

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """A protocol cannot run with the requested configuration."""


# --------------------------------------------------------------------------- grids


def make_mask(n: int, rate: float, seed: int | None) -> np.ndarray:
    """Uniform random sampling set of ``round(rate * n^2)`` entries, without replacement."""
    if not 0 < rate <= 1:
        raise ValueError("sampling rate must lie in (0, 1]")
    total = n * n
    count = int(round(rate * total))
    mask = np.zeros(total, dtype=bool)
    if count >= total:
        mask[:] = True
    else:
        rng = np.random.default_rng(seed)
        mask[rng.choice(total, size=count, replace=False)] = True
    return mask.reshape(n, n)


@dataclass(frozen=True)
class GridSpec:
    n: int
    dt: float  # ms
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.n < 8:
            raise ValueError("grid needs n >= 8")
        if self.n & (self.n - 1):
            raise ValueError("grid size n must be a power of two")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != (self.n, self.n):
                raise ValueError("mask shape must be (n, n)")
            object.__setattr__(self, "mask", m)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n) * self.dt

    @property
    def total_time(self) -> float:
        return self.n * self.dt

    @property
    def sampling_rate(self) -> float:
        return 1.0 if self.mask is None else float(self.mask.mean())

    @classmethod
    def spanning(cls, n: int, total_time: float, mask=None) -> "GridSpec":
        return cls(n, total_time / n, mask)


@dataclass
class SignalMatrix:
    """Real n x n readout grid over (t1, t2).

    Unobserved entries hold NaN and are marked False in ``mask``.
    """

    values: np.ndarray
    dt: float
    mask: np.ndarray | None = None
    protocol: str = ""
    config_hash: str = ""
    evaluations: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = self.values.shape[0]
        if self.values.shape != (n, n):
            raise ValueError("signal matrix must be square")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.all():
                self.mask = None
            else:
                self.values = np.where(self.mask, self.values, np.nan)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def is_complete(self) -> bool:
        return self.mask is None

    def observed(self) -> np.ndarray:
        """Observed entries with unobserved ones set to 0, for completion input."""
        return np.nan_to_num(self.values, nan=0.0)


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot hash {type(o).__name__}")


# --------------------------------------------------------------------------- engine


@dataclass
class TwoTimeModel:
    """S(t1, t2) = Tr[ M U(t2) R U(t1) rho1 U(t1)^+ R^+ U(t2)^+ ] with U = exp(-i H_free t)."""

    h_free: np.ndarray
    rho1: np.ndarray
    mixer: np.ndarray
    observable: np.ndarray

    def __post_init__(self):
        prop = Propagator(self.h_free)
        v = prop.vectors
        self.energies = prop.energies
        self._rho = v.conj().T @ as_density(self.rho1) @ v
        self._mix = v.conj().T @ self.mixer @ v
        self._obs_t = (v.conj().T @ self.observable @ v).T
        self._gaps = self.energies[:, None] - self.energies[None, :]

    def row_operator(self, t1: float) -> np.ndarray:
        x = self._rho * np.exp(-1j * self._gaps * t1)
        return self._mix @ x @ self._mix.conj().T

    def row(self, t1: float, t2s: np.ndarray) -> np.ndarray:
        y = self.row_operator(t1) * self._obs_t
        a = np.exp(-1j * np.outer(t2s, self.energies))
        return np.real(np.einsum("tk,tk->t", a @ y, a.conj()))

    def evaluate(self, grid: GridSpec, threads: int = 1) -> tuple[np.ndarray, int]:
        """Signal on the grid (NaN outside the mask) and the number of evaluated points."""
        times = grid.times
        out = np.full((grid.n, grid.n), np.nan)
        mask = grid.mask

        def work(i):
            cols = np.arange(grid.n) if mask is None else np.flatnonzero(mask[i])
            if cols.size:
                out[i, cols] = self.row(times[i], times[cols])
            return int(cols.size)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                counts = list(pool.map(work, range(grid.n)))
        else:
            counts = [work(i) for i in range(grid.n)]
        return out, int(sum(counts))


# --------------------------------------------------------------------------- helpers


def _nuclear_ops(n: int, direction):
    frame = field_frame(direction)
    z = frame[2]
    return [embed(z[0] * SX + z[1] * SY + z[2] * SZ, i, n) for i in range(n)]


def _resolve_species(system: SpinSystem, species) -> list[str]:
    if species is None:
        seen = []
        for s in system.species:
            if s not in seen:
                seen.append(s)
        return seen
    return [species] if isinstance(species, str) else list(species)


def _check_resonance(system: SpinSystem, couplings: CouplingSet, species: str, what: str) -> list[int]:
    idx = system.indices(species)
    if not idx:
        raise ConfigurationError(f"{what}: no nucleus of species {species!r}")
    if not np.any(couplings.g_perp[idx] > 0):
        raise ConfigurationError(
            f"{what}: Hartmann-Hahn exchange with {species} is impossible (g_perp = 0 for all its nuclei)"
        )
    return idx


def default_readout_tau(g_perp: np.ndarray, load: float = 0.5) -> float:
    """Readout window with 2 tau^2 sum (2 pi g_perp)^2 = ``load``."""
    s = float(np.sum((2 * np.pi * np.asarray(g_perp)) ** 2))
    return float(np.sqrt(load / (2.0 * s)))


def check_hartmann_hahn(field: FieldConfig, system: SpinSystem, species: str, rabi: float | None, tol: float):
    """Warn when ``rabi`` misses the Hartmann-Hahn condition for ``species`` by more than ``tol`` kHz."""
    if rabi is None:
        return
    omega_nv, omega_i = interaction_frequencies(system, field, species, rabi)
    target = omega_i[system.indices(species)[0]]
    if abs(omega_nv - target) > tol:
        warnings.warn(
            f"NV Rabi {rabi:.6g} kHz misses the Hartmann-Hahn condition for {species} "
            f"(Omega_nv = (gamma B - Delta_p) + omega_f) by {omega_nv - target:.3g} kHz",
            stacklevel=3,
        )


# --------------------------------------------------------------------------- COSY


@dataclass(frozen=True)
class CosySettings:
    readout_species: str
    polarize_species: tuple[str, ...] | None = None  # None: every species
    pulse_species: tuple[str, ...] | None = None  # None: every nucleus
    polarize_cycles: int = 4
    polarize_tau: float | None = None  # ms; default: flip-flop time of the strongest nucleus
    readout_tau: float | None = None  # ms; default: perturbative load 0.5
    readout_axis: str = "x"
    rabi: float | None = None  # kHz; default: exact Hartmann-Hahn
    gpar_operator: str = "sigma_x"
    resonance_tol: float = 1.0  # kHz
    decouple_nuclei: bool = False  # zero g_ij (control experiment)


def _interaction(system, couplings, field, species, cfg_rabi, gpar):
    return build_interaction_h(system, couplings, field, species, rabi=cfg_rabi, gpar_operator=gpar)


def prepare_polarized(system: SpinSystem, field: FieldConfig, settings: CosySettings, couplings=None):
    """Nuclear density matrix after NV polarization of the requested species."""
    couplings = couplings or compute_couplings(system, field.direction)
    d = 2 ** len(system)
    rho = np.kron(np.outer(NV_PLUS, NV_PLUS.conj()), np.eye(d) / d)
    for species in _resolve_species(system, settings.polarize_species):
        idx = _check_resonance(system, couplings, species, "polarization")
        check_hartmann_hahn(field, system, species, settings.rabi, settings.resonance_tol)
        h_int = _interaction(system, couplings, field, species, settings.rabi, settings.gpar_operator)
        tau_p = settings.polarize_tau or flip_flop_time(float(np.max(couplings.g_perp[idx])))
        rho = polarize(rho, h_int, tau_p, settings.polarize_cycles)
    return partial_trace_nv(rho)


def cosy_model(
    system: SpinSystem,
    field: FieldConfig,
    settings: CosySettings,
) -> TwoTimeModel:
    couplings = compute_couplings(system, field.direction)
    ro_idx = _check_resonance(system, couplings, settings.readout_species, "readout")
    check_hartmann_hahn(field, system, settings.readout_species, settings.rabi, settings.resonance_tol)
    rho_nuc = prepare_polarized(system, field, settings, couplings)

    free_couplings = couplings.without_internuclear() if settings.decouple_nuclei else couplings
    h_free = build_free_h(system, field, free_couplings, include_nv=False)
    pulse = PulseSpec(settings.pulse_species, "x", np.pi / 2)
    r90 = pulse_unitary(system, pulse, field.direction, include_nv=False)

    h_ro = _interaction(system, couplings, field, settings.readout_species, settings.rabi, settings.gpar_operator)
    tau_r = settings.readout_tau or default_readout_tau(couplings.g_perp[ro_idx])
    m = readout_observable(h_ro, tau_r)
    rot_axis, angle = TRANSVERSE_ROTATION[settings.readout_axis]
    r_ro = pulse_unitary(
        system, PulseSpec(settings.readout_species, rot_axis, angle), field.direction, include_nv=False
    )
    observable = r_ro.conj().T @ m @ r_ro
    rho1 = r90 @ rho_nuc @ r90.conj().T
    return TwoTimeModel(h_free, rho1, r90, observable)


def run_cosy(
    system: SpinSystem,
    field: FieldConfig,
    grid: GridSpec,
    readout_species: str | None = None,
    settings: CosySettings | None = None,
    threads: int = 1,
) -> SignalMatrix:
    """Polarize, pi/2, t1, pi/2, t2, species-selective transverse readout."""
    if settings is None:
        if readout_species is None:
            raise ConfigurationError("run_cosy needs a readout species")
        settings = CosySettings(readout_species=readout_species)
    model = cosy_model(system, field, settings)
    values, count = model.evaluate(grid, threads)
    return SignalMatrix(
        values,
        grid.dt,
        grid.mask,
        protocol="cosy",
        evaluations=count,
        extras={"readout_species": settings.readout_species},
    )


# --------------------------------------------------------------------------- strong coupling


@dataclass(frozen=True)
class StrongSettings:
    target_species: str
    tau: float | None = None  # ms; default: flip-flop time of the strongest target nucleus
    nv_initial: str = "m-1"  # "m-1" (computational |m=-1>) or "plus" (sigma_x eigenstate)
    rabi: float | None = None
    gpar_operator: str = "sigma_x"
    resonance_tol: float = 1.0
    decouple_nv: bool = False  # g_perp = 0 control


NV_INITIAL_STATES = {"m-1": NV_M1, "plus": NV_PLUS}


def strong_parts(system: SpinSystem, field: FieldConfig, settings: StrongSettings):
    couplings = compute_couplings(system, field.direction)
    if settings.decouple_nv:
        couplings = CouplingSet(couplings.g_par, np.zeros_like(couplings.g_perp), couplings.g_ij, couplings.r_hat_ij)
        idx = system.indices(settings.target_species)
        tau = settings.tau or 0.1
    else:
        idx = _check_resonance(system, couplings, settings.target_species, "strong coupling")
        tau = settings.tau or flip_flop_time(float(np.max(couplings.g_perp[idx])))
    if not idx:
        raise ConfigurationError(f"no nucleus of species {settings.target_species!r}")
    check_hartmann_hahn(field, system, settings.target_species, settings.rabi, settings.resonance_tol)
    try:
        nv0 = NV_INITIAL_STATES[settings.nv_initial]
    except KeyError:
        raise ConfigurationError(f"nv_initial must be one of {sorted(NV_INITIAL_STATES)}") from None
    h_int = build_interaction_h(
        system, couplings, field, settings.target_species, rabi=settings.rabi, gpar_operator=settings.gpar_operator
    )
    h_free = build_free_h(system, field, couplings, include_nv=True)
    d = 2 ** len(system)
    rho0 = np.kron(np.outer(nv0, nv0.conj()), np.eye(d) / d)
    u_tau = Propagator(h_int).unitary(tau)
    proj = np.kron(np.outer(nv0, nv0.conj()), np.eye(d))
    return rho0, u_tau, h_free, proj, tau


def strong_model(system: SpinSystem, field: FieldConfig, settings: StrongSettings, observable=None) -> TwoTimeModel:
    rho0, u_tau, h_free, proj, _ = strong_parts(system, field, settings)
    obs = proj if observable is None else observable
    rho1 = u_tau @ rho0 @ u_tau.conj().T
    return TwoTimeModel(h_free, rho1, u_tau, u_tau.conj().T @ obs @ u_tau)


def run_strong_coupling(
    system: SpinSystem,
    field: FieldConfig,
    grid: GridSpec,
    tau: float | None = None,
    settings: StrongSettings | None = None,
    threads: int = 1,
    track_polarization: bool = True,
) -> SignalMatrix:
    """Entangle (tau), t1, entangle (tau), t2, entangle (tau), project the NV on its initial state.

    With ``track_polarization`` the largest nuclear |<s_z>| reached after the
    full sequence anywhere on the grid is stored in ``extras``.
    """
    if settings is None:
        raise ConfigurationError("run_strong_coupling needs StrongSettings (target species)")
    if tau is not None:
        settings = StrongSettings(**{**settings.__dict__, "tau": tau})
    model = strong_model(system, field, settings)
    values, count = model.evaluate(grid, threads)
    extras = {"target_species": settings.target_species}
    if track_polarization:
        extras["max_abs_sz"] = max_nuclear_polarization(system, field, settings, grid)
    return SignalMatrix(values, grid.dt, grid.mask, protocol="strong", evaluations=count, extras=extras)


def max_nuclear_polarization(system, field, settings, grid: GridSpec) -> float:
    """max over nuclei and grid points of |<s_z>| at the end of the sequence."""
    n_nuc = len(system)
    worst = 0.0
    full = GridSpec(grid.n, grid.dt)
    for i in range(n_nuc):
        op = embed(_field_sz(field.direction), i + 1, n_nuc + 1)
        model = strong_model(system, field, settings, observable=op)
        values, _ = model.evaluate(full)
        worst = max(worst, float(np.max(np.abs(values))))
    return worst


def _field_sz(direction):
    z = field_frame(direction)[2]
    return z[0] * SX + z[1] * SY + z[2] * SZ


def sequence_polarization_trace(system, field, settings: StrongSettings, t1: float, t2: float) -> list[np.ndarray]:
    """Nuclear <s_z> after each stage of one strong-coupling shot."""
    rho0, u_tau, h_free, _, _ = strong_parts(system, field, settings)
    prop = Propagator(h_free)
    n_nuc = len(system)
    ops = [embed(_field_sz(field.direction), i + 1, n_nuc + 1) for i in range(n_nuc)]

    def sz(r):
        return np.array([np.real(np.trace(o @ r)) for o in ops])

    trace = [sz(rho0)]
    rho = u_tau @ rho0 @ u_tau.conj().T
    trace.append(sz(rho))
    rho = prop.apply(rho, t1)
    trace.append(sz(rho))
    rho = u_tau @ rho @ u_tau.conj().T
    trace.append(sz(rho))
    rho = prop.apply(rho, t2)
    trace.append(sz(rho))
    rho = u_tau @ rho @ u_tau.conj().T
    trace.append(sz(rho))
    return trace


# --------------------------------------------------------------------------- angle sweep


@dataclass(frozen=True)
class SweepPoint:
    direction: np.ndarray
    theta: float  # rad in [0, pi], between field and the internuclear vector
    splitting: float  # kHz, from the simulated spectrum
    resolution: float  # kHz, one DFT bin
    resolved: bool
    expected: float  # kHz, |doublet_splitting|


def free_induction(system: SpinSystem, field: FieldConfig, times: np.ndarray) -> np.ndarray:
    """Complex transverse signal <sum s_x + i s_y> after a pi/2 pulse on z-polarized nuclei."""
    n = len(system)
    h = build_free_h(system, field, include_nv=False)
    frame = field_frame(field.direction)
    # spin-up along the field for every nucleus
    _, vecs = np.linalg.eigh(_field_sz(field.direction))
    up = vecs[:, -1]
    psi = up
    for _ in range(n - 1):
        psi = np.kron(psi, up)
    r90 = pulse_unitary(system, PulseSpec(None, "y", np.pi / 2), field.direction, include_nv=False)
    psi = r90 @ psi
    splus = sum(spin_along(frame[0] + 1j * frame[1], i, n) for i in range(n))
    prop = Propagator(h)
    v = prop.vectors
    c = v.conj().T @ psi
    sp_e = v.conj().T @ splus @ v
    a = np.exp(-1j * np.outer(times, prop.energies)) * c[None, :]
    return np.einsum("tk,kl,tl->t", a.conj(), sp_e, a)


def run_angle_sweep(
    system: SpinSystem,
    magnitude: float,
    directions: Sequence,
    n: int = 1024,
    total_time: float = 2.048,
    min_contrast: float = 0.2,
) -> list[SweepPoint]:
    """Dipolar doublet splitting of a two-nucleus system for each field direction."""
    from .spectra import spectrum1d, splitting_from_spectrum

    if len(system) != 2:
        raise ConfigurationError("the angle sweep needs exactly two nuclei")
    a, b = system.nuclei
    r_hat = (b.position - a.position) / np.linalg.norm(b.position - a.position)
    times = np.arange(n) * (total_time / n)
    points = []
    for d in directions:
        d = np.asarray(d, dtype=float)
        d = d / np.linalg.norm(d)
        fld = FieldConfig(magnitude, d)
        sig = free_induction(system, fld, times)
        freqs, mag = spectrum1d(sig, total_time / n)
        centre = (fld.larmor(a.gamma) + fld.larmor(b.gamma)) / 2
        res = splitting_from_spectrum(mag, freqs, centre, min_contrast=min_contrast)
        theta = float(np.arccos(np.clip(d @ r_hat, -1, 1)))
        points.append(
            SweepPoint(
                d,
                theta,
                res.splitting,
                res.uncertainty,
                res.resolved,
                abs(doublet_splitting(a, b, d)),
            )
        )
    return points


def add_measurement_noise(signal: SignalMatrix, sigma: float, seed: int | None = None) -> SignalMatrix:
    """Gaussian noise on observed entries (testing utility)."""
    rng = np.random.default_rng(seed)
    noisy = signal.values + sigma * rng.standard_normal(signal.values.shape)
    return SignalMatrix(noisy, signal.dt, signal.mask, signal.protocol, signal.config_hash, signal.evaluations)
