"""Physical system: nuclei, NV sensor, field, and the couplings derived from geometry.

Units used throughout the package:

- positions in Angstrom
- gyromagnetic ratios in MHz/T (signed)
- magnetic fields in Gauss
- couplings, detunings and Rabi frequencies in kHz (ordinary frequency)

Angular frequencies only appear once Hamiltonians are assembled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import constants as const

GAMMA_MHZ_PER_T: dict[str, float] = {
    "1H": 42.577478518,
    "13C": 10.7084,
    "15N": -4.3173,
    "31P": 17.2351,
}
GAMMA_ELECTRON = -28024.9514242  # MHz/T

MIN_INTERNUCLEAR = 0.1  # Angstrom
MIN_NV_DISTANCE = 1.0  # Angstrom

_DIPOLAR_SI = const.mu_0 / (4 * np.pi) * const.hbar


class GeometryError(ValueError):
    """Degenerate or invalid geometry (coincident spins, NV too close, collinear fits)."""


def _unit(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be a finite 3-vector, got {v!r}")
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError(f"{name} must be nonzero")
    return v / norm


def _check_unit(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise ValueError(f"{name} must be a unit 3-vector (|v| = 1 within 1e-12), got {v!r}")
    return v


@dataclass(frozen=True)
class Nucleus:
    species: str
    position: np.ndarray
    gamma: float = None  # type: ignore[assignment]

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise ValueError(f"nucleus position must be a finite 3-vector, got {self.position!r}")
        object.__setattr__(self, "position", pos)
        gamma = self.gamma
        if gamma is None:
            try:
                gamma = GAMMA_MHZ_PER_T[self.species]
            except KeyError:
                raise ValueError(
                    f"unknown species {self.species!r}; pass gamma explicitly "
                    f"(known: {', '.join(GAMMA_MHZ_PER_T)})"
                ) from None
        if gamma == 0 or not np.isfinite(gamma):
            raise ValueError("gamma must be finite and nonzero")
        object.__setattr__(self, "gamma", float(gamma))


@dataclass(frozen=True)
class NVSensor:
    position: np.ndarray
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    rabi: float = 0.0  # kHz

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise ValueError("NV position must be a finite 3-vector")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "axis", _check_unit(self.axis, "NV axis"))
        if self.rabi < 0:
            raise ValueError("NV Rabi frequency must be >= 0")


@dataclass(frozen=True)
class FieldConfig:
    """Static field plus the RF decoupling drive.

    ``rf_detuning`` and ``rf_strength`` are in kHz. With ``decoupling=True`` the
    two must satisfy ``rf_strength == sqrt(2) * rf_detuning``.
    """

    magnitude: float  # Gauss
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    rf_detuning: float = 0.0
    rf_strength: float = 0.0
    decoupling: bool = False

    def __post_init__(self):
        if not self.magnitude > 0:
            raise ValueError("field magnitude must be > 0")
        object.__setattr__(self, "direction", _check_unit(self.direction, "field direction"))
        if self.decoupling:
            want = np.sqrt(2.0) * self.rf_detuning
            if abs(self.rf_strength - want) > 1e-9 * max(abs(want), 1e-300):
                raise ValueError(
                    "decoupling requested but Omega_p != sqrt(2)*Delta_p "
                    f"(Omega_p={self.rf_strength}, sqrt(2)*Delta_p={want})"
                )

    @property
    def tesla(self) -> float:
        return self.magnitude * 1e-4

    @property
    def omega_f(self) -> float:
        """Effective nuclear energy scale of the dressed target species, kHz."""
        return float(np.hypot(self.rf_detuning, self.rf_strength))

    def larmor(self, gamma: float) -> float:
        """|gamma| B in kHz."""
        return abs(gamma) * self.tesla * 1e3

    @classmethod
    def decoupled(cls, magnitude, omega_f, direction=(0.0, 0.0, 1.0)) -> "FieldConfig":
        """Field whose RF drive satisfies Omega_p = sqrt(2) Delta_p and gives ``omega_f``."""
        delta = omega_f / np.sqrt(3.0)
        return cls(
            magnitude=magnitude,
            direction=_unit(direction, "field direction"),
            rf_detuning=delta,
            rf_strength=np.sqrt(2.0) * delta,
            decoupling=True,
        )


@dataclass(frozen=True)
class SpinSystem:
    nuclei: tuple[Nucleus, ...]
    nv: NVSensor

    def __post_init__(self):
        nuclei = tuple(self.nuclei)
        if not nuclei:
            raise ValueError("a spin system needs at least one nucleus")
        object.__setattr__(self, "nuclei", nuclei)
        pos = np.array([n.position for n in nuclei])
        for i in range(len(nuclei)):
            for j in range(i + 1, len(nuclei)):
                if np.linalg.norm(pos[i] - pos[j]) <= MIN_INTERNUCLEAR:
                    raise GeometryError(f"nuclei {i} and {j} are closer than {MIN_INTERNUCLEAR} A")
            if np.linalg.norm(pos[i] - self.nv.position) <= MIN_NV_DISTANCE:
                raise GeometryError(f"nucleus {i} lies inside the NV exclusion radius")

    def __len__(self):
        return len(self.nuclei)

    @property
    def species(self) -> list[str]:
        return [n.species for n in self.nuclei]

    def indices(self, species: str | Iterable[str] | None) -> list[int]:
        """Nucleus indices selected by a species label, a collection of labels, or None (all)."""
        if species is None:
            return list(range(len(self.nuclei)))
        wanted = {species} if isinstance(species, str) else set(species)
        return [i for i, n in enumerate(self.nuclei) if n.species in wanted]

    def with_nuclei(self, nuclei: Sequence[Nucleus]) -> "SpinSystem":
        return SpinSystem(tuple(nuclei), self.nv)


@dataclass(frozen=True)
class CouplingSet:
    g_par: np.ndarray  # (N,) kHz
    g_perp: np.ndarray  # (N,) kHz, >= 0
    g_ij: np.ndarray  # (N, N) kHz, symmetric, zero diagonal
    r_hat_ij: np.ndarray  # (N, N, 3)

    def without_internuclear(self) -> "CouplingSet":
        return CouplingSet(self.g_par, self.g_perp, np.zeros_like(self.g_ij), self.r_hat_ij)


def dipolar_constant(a: Nucleus, b: Nucleus) -> float:
    """(mu0/4pi) hbar gamma_a gamma_b / r^3 as an ordinary frequency in kHz."""
    r = np.linalg.norm(a.position - b.position)
    if r <= MIN_INTERNUCLEAR:
        raise GeometryError(f"coincident nuclei (r = {r} A)")
    ga = a.gamma * 1e6 * 2 * np.pi
    gb = b.gamma * 1e6 * 2 * np.pi
    return float(_DIPOLAR_SI * ga * gb / (r * 1e-10) ** 3 / (2 * np.pi) / 1e3)


def dipolar_splitting(a: Nucleus, b: Nucleus, field_dir) -> float:
    """Dipolar splitting d (3 cos^2 theta - 1) in kHz, theta between field and the pair axis."""
    b_hat = _check_unit(field_dir, "field direction")
    d = dipolar_constant(a, b)
    r_hat = _unit(b.position - a.position)
    c = float(b_hat @ r_hat)
    return d * (3.0 * c * c - 1.0)


def doublet_splitting(a: Nucleus, b: Nucleus, field_dir) -> float:
    """Observable line splitting of a dipolar pair in the high-field limit, kHz.

    Unlike spins pick up the flip-flop part of the secular coupling, which widens
    the doublet by 3/2 relative to the heteronuclear value.
    """
    kappa = 1.5 if a.species == b.species and a.gamma == b.gamma else 1.0
    return kappa * dipolar_splitting(a, b, field_dir)


def nv_hyperfine(nv: NVSensor, n: Nucleus, field_dir) -> tuple[float, float]:
    """Secular (g_par) and spin-flip (g_perp >= 0) parts of the NV-nucleus dipolar coupling, kHz."""
    z = _check_unit(field_dir, "quantization axis")
    rvec = n.position - nv.position
    r = np.linalg.norm(rvec)
    if r <= MIN_NV_DISTANCE:
        raise GeometryError(f"nucleus within {MIN_NV_DISTANCE} A of the NV (r = {r} A)")
    u = rvec / r
    d = (
        _DIPOLAR_SI
        * (GAMMA_ELECTRON * 1e6 * 2 * np.pi)
        * (n.gamma * 1e6 * 2 * np.pi)
        / (r * 1e-10) ** 3
        / (2 * np.pi)
        / 1e3
    )
    tensor = d * (np.eye(3) - 3.0 * np.outer(u, u))
    column = tensor @ z
    g_par = float(z @ column)
    g_perp = float(np.linalg.norm(column - g_par * z))
    return g_par, g_perp


def hartmann_hahn_rabi(field: FieldConfig, gamma: float) -> float:
    """NV Rabi frequency (kHz) matching the dressed nuclei: (|gamma|B - Delta_p) + omega_f."""
    return field.larmor(gamma) - field.rf_detuning + field.omega_f


def compute_couplings(system: SpinSystem, quant_axis=None) -> CouplingSet:
    """All NV hyperfine and internuclear couplings of ``system``.

    ``quant_axis`` defaults to the NV axis.
    """
    axis = system.nv.axis if quant_axis is None else _check_unit(quant_axis, "quantization axis")
    nuc = system.nuclei
    count = len(nuc)
    g_par = np.zeros(count)
    g_perp = np.zeros(count)
    g_ij = np.zeros((count, count))
    r_hat = np.zeros((count, count, 3))
    for i, n in enumerate(nuc):
        g_par[i], g_perp[i] = nv_hyperfine(system.nv, n, axis)
        for j in range(i + 1, count):
            g_ij[i, j] = g_ij[j, i] = dipolar_constant(n, nuc[j])
            u = _unit(nuc[j].position - n.position)
            r_hat[i, j] = u
            r_hat[j, i] = -u
    return CouplingSet(g_par, g_perp, g_ij, r_hat)


def read_molecule(path: str | Path) -> list[Nucleus]:
    """Parse ``species x y z`` lines (Angstrom); ``#`` starts a comment."""
    nuclei = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'species x y z', got {raw!r}")
        try:
            xyz = [float(p) for p in parts[1:]]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric coordinate in {raw!r}") from None
        nuclei.append(Nucleus(parts[0], np.array(xyz)))
    if not nuclei:
        raise ValueError(f"{path}: no nuclei found")
    return nuclei


def write_molecule(path: str | Path, nuclei: Sequence[Nucleus], comment: str = "") -> None:
    lines = [f"# {comment}"] if comment else []
    for n in nuclei:
        x, y, z = n.position
        lines.append(f"{n.species} {x:.6f} {y:.6f} {z:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
