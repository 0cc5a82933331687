"""2D spectra, aliasing, peak picking, doublet splittings and geometry inversion.

Frequency conventions: time steps are in ms, so raw DFT axes come out in kHz.
:class:`Spectrum2D` reports MHz; 1-D helpers stay in kHz because they feed
the kHz splitting model directly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage, optimize

from .spins import GeometryError, dipolar_constant, Nucleus


class MaskedInputError(ValueError):
    pass


# --------------------------------------------------------------------------- DFT


@dataclass(frozen=True)
class Spectrum2D:
    data: np.ndarray  # complex, unnormalized forward DFT
    dt: float  # ms

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)

    @property
    def freqs(self) -> np.ndarray:
        """Signed bin frequencies, MHz."""
        return np.fft.fftfreq(self.n, self.dt) / 1e3

    @property
    def sample_rate(self) -> float:
        """MHz."""
        return 1.0 / self.dt / 1e3

    @property
    def bin_width(self) -> float:
        """MHz."""
        return self.sample_rate / self.n

    def folded_bin(self, k: int) -> int:
        k = k % self.n
        return min(k, self.n - k)

    def folded_magnitude(self) -> np.ndarray:
        """Half-band view: max |S| over the four sign combinations, bins 0..n/2."""
        m = self.magnitude
        h = self.n // 2 + 1
        idx = np.arange(h)
        neg = (-idx) % self.n
        return np.maximum.reduce([m[np.ix_(idx, idx)], m[np.ix_(idx, neg)], m[np.ix_(neg, idx)], m[np.ix_(neg, neg)]])

    def value_at(self, f1: float, f2: float) -> float:
        """Folded magnitude at the bin nearest to (f1, f2) MHz (folded frequencies)."""
        k1 = int(round(alias_fold(f1, self.sample_rate) / self.bin_width))
        k2 = int(round(alias_fold(f2, self.sample_rate) / self.bin_width))
        return float(self.folded_magnitude()[k1, k2])


def dft2(signal, dt: float | None = None, window: str | None = None) -> Spectrum2D:
    """Forward 2D DFT (unnormalized); inverse carries the 1/n^2.

    ``signal`` is a :class:`~nv2dnmr.protocols.SignalMatrix` or an array plus ``dt``.
    """
    values = getattr(signal, "values", signal)
    if dt is None:
        dt = getattr(signal, "dt", None)
        if dt is None:
            raise ValueError("dt is required for array input")
    values = np.asarray(values)
    if np.isnan(values).any() or getattr(signal, "mask", None) is not None:
        raise MaskedInputError("signal has unobserved entries; run matrix completion before the DFT")
    if window == "hann":
        w = np.hanning(values.shape[0])
        values = values * np.outer(w, w)
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    return Spectrum2D(np.fft.fft2(values), float(dt))


def idft2(spec: Spectrum2D) -> np.ndarray:
    return np.fft.ifft2(spec.data)


def spectrum1d(signal: np.ndarray, dt: float, window: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(frequencies in kHz, |DFT|) of a 1-D (possibly complex) signal sampled every ``dt`` ms."""
    s = np.asarray(signal)
    if window == "hann":
        s = s * np.hanning(s.size)
    return np.fft.fftfreq(s.size, dt), np.abs(np.fft.fft(s))


# --------------------------------------------------------------------------- aliasing


def alias_fold(f_true: float, f_sample: float) -> float:
    """Observed frequency of a real signal at ``f_true``: reflection into [0, f_sample/2]."""
    if not f_sample > 0:
        raise ValueError("sample rate must be > 0")
    r = float(np.mod(f_true, f_sample))
    return f_sample - r if r > f_sample / 2 else r


def unfold(f_observed: float, f_sample: float, near: float) -> float:
    """The alias preimage of ``f_observed`` closest to ``near`` (e.g. an expected Larmor frequency)."""
    k = np.round(abs(near) / f_sample)
    candidates = [m * f_sample + s * f_observed for m in (k - 1, k, k + 1) for s in (1, -1)]
    candidates = [c for c in candidates if c >= 0]
    return float(min(candidates, key=lambda c: abs(c - abs(near))))


def alias_wrap(f_true: float, f_sample: float) -> float:
    """Observed frequency of a complex (quadrature) signal: wrap into [-f_sample/2, f_sample/2)."""
    return float((f_true + f_sample / 2) % f_sample - f_sample / 2)


# --------------------------------------------------------------------------- peaks


@dataclass(frozen=True)
class Peak:
    f1: float  # MHz, folded
    f2: float
    amplitude: float
    kind: str  # diagonal | cross | harmonic
    bins: tuple[int, int]


def harmonic_candidates(larmor: Sequence[float], f_sample: float, max_coeff: int = 2) -> list[float]:
    """Folded positions of small-integer Larmor combinations that are not single Larmor lines."""
    singles = {round(alias_fold(f, f_sample), 12) for f in larmor}
    out = set()
    for coeffs in itertools.product(range(-max_coeff, max_coeff + 1), repeat=len(larmor)):
        if sum(abs(c) for c in coeffs) <= 1 and any(coeffs):
            continue
        f = alias_fold(float(np.dot(coeffs, larmor)), f_sample)
        if round(f, 12) not in singles:
            out.add(f)
    return sorted(out)


def find_peaks(
    spec: Spectrum2D,
    rel_threshold: float = 0.1,
    min_separation: int = 2,
    larmor: Sequence[float] | None = None,
    exclude_zero: bool = False,
) -> list[Peak]:
    """Local maxima above ``rel_threshold * max`` in the folded half-band view.

    Peaks closer than ``min_separation`` bins to a stronger one are suppressed.
    With ``larmor`` (MHz, true frequencies) a peak whose coordinates are not
    both single folded Larmor lines, but match a small-integer combination
    within one bin, is labelled ``harmonic``.
    """
    if not 0 < rel_threshold <= 1:
        raise ValueError("rel_threshold must lie in (0, 1]")
    mag = spec.folded_magnitude()
    top = float(mag.max()) if mag.size else 0.0
    if top <= 0:
        return []
    size = 2 * min_separation + 1
    local = mag == ndimage.maximum_filter(mag, size=size, mode="nearest")
    cand = np.argwhere(local & (mag >= rel_threshold * top))
    if exclude_zero:
        cand = cand[(cand[:, 0] > 0) & (cand[:, 1] > 0)]
    order = np.argsort(-mag[cand[:, 0], cand[:, 1]], kind="stable")
    kept: list[tuple[int, int]] = []
    for k1, k2 in cand[order]:
        if all(max(abs(k1 - a), abs(k2 - b)) >= min_separation for a, b in kept):
            kept.append((int(k1), int(k2)))
    bw = spec.bin_width
    singles = harm = None
    if larmor is not None:
        singles = [alias_fold(f, spec.sample_rate) for f in larmor]
        harm = harmonic_candidates(larmor, spec.sample_rate)
    peaks = []
    for k1, k2 in kept:
        kind = "diagonal" if abs(k1 - k2) <= 1 else "cross"
        if larmor is not None:
            is_single = [min(abs(k * bw - s) for s in singles) <= bw for k in (k1, k2)]
            is_harm = [bool(harm) and min(abs(k * bw - h) for h in harm) <= bw for k in (k1, k2)]
            if not all(is_single) and all(s or h for s, h in zip(is_single, is_harm)):
                kind = "harmonic"
        peaks.append(Peak(k1 * bw, k2 * bw, float(mag[k1, k2]), kind, (k1, k2)))
    return peaks


def dominant_cross_bin(spec: Spectrum2D, guard: int = 2) -> tuple[int, int]:
    """Folded bin of the strongest off-diagonal feature.

    Bins within ``guard`` of the diagonal or of either zero-frequency axis are
    ignored.
    """
    mag = spec.folded_magnitude()
    h = mag.shape[0]
    k1, k2 = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    region = (np.abs(k1 - k2) > guard) & (k1 > guard) & (k2 > guard)
    masked = np.where(region, mag, -np.inf)
    i, j = np.unravel_index(int(np.argmax(masked)), mag.shape)
    return int(i), int(j)


# --------------------------------------------------------------------------- splittings


@dataclass(frozen=True)
class SplittingResult:
    splitting: float  # kHz (nan when unresolved)
    uncertainty: float  # kHz, one DFT bin
    resolved: bool
    lines: tuple[float, ...]  # kHz, observed line positions


def splitting_from_spectrum(
    magnitude: np.ndarray,
    freqs: np.ndarray,
    expected_center: float | None = None,
    window: float | None = None,
    min_contrast: float = 0.35,
) -> SplittingResult:
    """Separation of the two strongest lines of a doublet, in the units of ``freqs``.

    ``freqs`` is the DFT axis of a complex signal. ``expected_center`` is a true
    frequency, wrapped into band before the search window (``window`` on either
    side, default a quarter band) is applied. Doublets weaker than
    ``min_contrast`` of the main line, or separated by under two bins, are
    reported unresolved.
    """
    mag = np.asarray(magnitude, dtype=float)
    n = mag.size
    bw = float(abs(freqs[1] - freqs[0]))
    fs = bw * n
    dist = np.zeros(n)
    allowed = np.ones(n, dtype=bool)
    if expected_center is not None:
        c = alias_wrap(expected_center, fs)
        dist = np.abs((freqs - c + fs / 2) % fs - fs / 2)
        allowed = dist <= (fs / 4 if window is None else window)
    left, right = np.roll(mag, 1), np.roll(mag, -1)
    is_max = (mag >= left) & (mag >= right) & allowed
    idx = np.flatnonzero(is_max)
    if idx.size == 0:
        return SplittingResult(float("nan"), bw, False, ())
    idx = idx[np.argsort(-mag[idx], kind="stable")]
    first = idx[0]
    second = None
    for k in idx[1:]:
        sep = min((k - first) % n, (first - k) % n)
        if sep >= 2 and mag[k] >= min_contrast * mag[first]:
            second = k
            break
    if second is None:
        return SplittingResult(float("nan"), bw, False, (float(freqs[first]),))
    sep = min((second - first) % n, (first - second) % n)
    return SplittingResult(sep * bw, bw, True, (float(freqs[first]), float(freqs[second])))


# --------------------------------------------------------------------------- geometry


@dataclass(frozen=True)
class GeometrySolution:
    r: float  # Angstrom
    axis: np.ndarray  # unit vector, sign fixed so the largest component is positive
    residual: float  # kHz, rms
    r_uncertainty: float  # Angstrom, linearized worst case over the measurement uncertainties


@dataclass
class GeometryFit:
    """Best solution plus every other solution consistent with the data.

    ``solutions`` is the ambiguity set: three field directions generally admit
    a few discrete (r, axis) roots, and the data alone cannot rank them.
    """

    solutions: list[GeometrySolution]
    planar: bool = False
    identifiable: bool = True
    sign_flagged: bool = False

    @property
    def best(self) -> GeometrySolution:
        return self.solutions[0]

    @property
    def r(self) -> float:
        return self.best.r

    @property
    def axis(self) -> np.ndarray:
        return self.best.axis

    @property
    def residual(self) -> float:
        return self.best.residual

    @property
    def r_uncertainty(self) -> float:
        return self.best.r_uncertainty

    def covers(self, r: float, rtol: float = 1e-9) -> bool:
        """True when ``r`` lies within the uncertainty (plus ``rtol`` relative) of some solution."""
        return any(abs(s.r - r) <= s.r_uncertainty + rtol * r for s in self.solutions)

    @property
    def degeneracy(self) -> str:
        notes = ["axis sign (r_hat ~ -r_hat)"]
        if self.planar:
            notes.append("axis assumed in the plane of the field directions")
        if len(self.solutions) > 1:
            notes.append(f"{len(self.solutions)} solutions fit the data equally well")
        if not self.identifiable:
            notes.append("continuous family: these directions do not fix r")
        return "; ".join(notes)


def _hemisphere(count: int) -> np.ndarray:
    i = np.arange(2 * count) + 0.5
    phi = np.arccos(1 - i / count)
    theta = np.pi * (1 + 5**0.5) * i
    pts = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return pts[pts[:, 2] >= 0]


def _canonical(u: np.ndarray) -> np.ndarray:
    return u if u[np.argmax(np.abs(u))] > 0 else -u


def _solve_geometry(dirs, vals, sig, c1, planar, basis, signed, tol):
    scale = float(np.max(np.abs(vals)))

    def axis_of(ang):
        if planar:
            return np.cos(ang[0]) * basis[0] + np.sin(ang[0]) * basis[1]
        th, ph = ang
        return np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])

    def shape(ang):
        f = 3 * (dirs @ axis_of(ang)) ** 2 - 1
        return f if signed else np.abs(f)

    def reduced(ang):
        # the 1/r^3 amplitude enters linearly and is projected out
        f = shape(ang)
        amp = float(f @ vals) / max(float(f @ f), 1e-300)
        return (vals - amp * f) / scale

    def full(p):
        return (c1_eff * np.exp(-3 * p[0]) * shape(p[1:]) - vals) / scale

    c1_eff = c1 if signed else abs(c1)
    if planar:
        starts = [[a] for a in np.linspace(0, np.pi, 24, endpoint=False)]
    else:
        starts = [[np.arccos(np.clip(u[2], -1, 1)), np.arctan2(u[1], u[0])] for u in _hemisphere(40)]
    cands = []
    for a0 in starts:
        red = optimize.least_squares(reduced, a0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
        f = shape(red.x)
        amp = float(f @ vals) / max(float(f @ f), 1e-300)
        if amp == 0 or np.sign(amp) != np.sign(c1_eff):
            continue  # would need a negative r^3
        p0 = np.concatenate([[np.log(c1_eff / amp) / 3], red.x])
        fit = optimize.least_squares(full, p0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        cands.append(fit)
    if not cands:
        return [], None, full
    rms = [float(np.sqrt(np.mean((c.fun * scale) ** 2))) for c in cands]
    accept = max(tol * scale, float(np.sqrt(np.mean(sig**2))), min(rms) * (1 + 1e-6))
    sols: list[GeometrySolution] = []
    best_fit = None
    for c, e in sorted(zip(cands, rms), key=lambda t: t[1]):
        if e > accept:
            continue
        r = float(np.exp(c.x[0]))
        u = _canonical(axis_of(c.x[1:]))
        if any(abs(r - s.r) <= 1e-6 * r and np.linalg.norm(u - s.axis) < 1e-5 for s in sols):
            continue
        jac = c.jac * scale
        dr = r * np.linalg.pinv(jac)[0]  # d r / d splitting_k
        sols.append(GeometrySolution(r, u, e, float(np.sum(np.abs(dr) * sig))))
        best_fit = best_fit or c
    return sols, best_fit, full


def fit_geometry(
    measurements: Iterable[tuple],
    gamma_a: float,
    gamma_b: float,
    kappa: float = 1.0,
    signed: bool = True,
    tol: float = 1e-7,
) -> GeometryFit:
    """Invert ``splitting = kappa * C / r^3 * (3 (b . u)^2 - 1)`` for ``r`` and the pair axis ``u``.

    ``measurements`` holds ``(field_direction, splitting_kHz)`` or
    ``(field_direction, splitting_kHz, uncertainty_kHz)``. Use ``kappa = 1.5``
    for like spins measured as a doublet and ``signed=False`` when only
    magnitudes are known. Two directions, or any coplanar set, are solved with
    the axis restricted to their plane; three or more non-coplanar directions
    give the full 3-D solution. Every solution whose rms residual is within the
    measurement uncertainty (or ``tol`` relative, noiseless) is returned.
    """
    rows = [tuple(m) for m in measurements]
    if len(rows) < 2:
        raise GeometryError("need at least two field directions")
    dirs = np.array([np.asarray(m[0], dtype=float) / np.linalg.norm(m[0]) for m in rows])
    vals = np.array([float(m[1]) for m in rows])
    sig = np.array([float(m[2]) if len(m) > 2 else 0.0 for m in rows])
    rank = np.linalg.matrix_rank(dirs, tol=1e-9)
    if rank < 2:
        raise GeometryError("field directions are collinear: rank-deficient geometry")
    if np.all(np.abs(vals) < 1e-12):
        raise GeometryError("all splittings vanish: no pair axis sits at the magic angle to every direction")

    c1 = kappa * dipolar_constant(
        Nucleus("a", np.zeros(3), gamma_a), Nucleus("b", np.array([1.0, 0, 0]), gamma_b)
    )  # kHz at 1 A
    planar = rank == 2
    basis = np.linalg.svd(dirs)[2][:2] if planar else np.eye(3)
    sols, best_fit, _ = _solve_geometry(dirs, vals, sig, c1, planar, basis, signed, tol)
    sign_flagged = False
    if signed:
        scale = float(np.max(np.abs(vals)))
        consistent = max(tol * scale, float(np.sqrt(np.mean(sig**2))))
        if not sols or sols[0].residual > 10 * consistent:
            alt, alt_fit, _ = _solve_geometry(dirs, np.abs(vals), sig, c1, planar, basis, False, tol)
            sign_flagged = bool(alt) and alt[0].residual <= consistent * 10
            if sign_flagged:
                # the signs cannot be realized; report the magnitude-only solution, flagged
                sols, best_fit = alt, alt_fit
            elif sols:
                raise GeometryError(
                    f"inconsistent splittings: best rms residual {sols[0].residual:.3g} kHz exceeds the "
                    f"measurement uncertainty ({consistent:.3g} kHz); pass per-direction uncertainties for noisy data"
                )
    if not sols:
        raise GeometryError("no physical solution: splitting signs are inconsistent with the coupling sign")
    jac = best_fit.jac
    identifiable = bool(np.linalg.matrix_rank(jac, tol=1e-7 * np.max(np.abs(jac))) == jac.shape[1])
    return GeometryFit(sols, planar=planar, identifiable=identifiable, sign_flagged=sign_flagged)


# --------------------------------------------------------------------------- export


def write_tsv(path: str | Path, grid: np.ndarray, fmt: str = "%.10g") -> None:
    np.savetxt(path, np.asarray(grid), delimiter="\t", fmt=fmt)


def write_pgm(path: str | Path, magnitude: np.ndarray, log_scale: bool = True) -> None:
    """8-bit binary PGM (P5) heat map, row 0 at the top."""
    m = np.asarray(magnitude, dtype=float)
    if log_scale:
        m = np.log10(m + 1e-12 * max(float(m.max()), 1e-300))
    lo, hi = float(m.min()), float(m.max())
    img = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_peaks(path: str | Path, peaks: Sequence[Peak]) -> None:
    lines = ["# f1_MHz\tf2_MHz\tamplitude\tkind\tbin1\tbin2"]
    for p in peaks:
        lines.append(f"{p.f1:.6f}\t{p.f2:.6f}\t{p.amplitude:.6g}\t{p.kind}\t{p.bins[0]}\t{p.bins[1]}")
    Path(path).write_text("\n".join(lines) + "\n")
