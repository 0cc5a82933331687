"""Named experiment presets.

Each preset is a config tree in the same shape a YAML config file takes (see
:mod:`nv2dnmr.config`). Sampling steps are pinned so that the folded Larmor
lines of the species involved land well apart from each other and from the
band edges.
"""

from __future__ import annotations

import copy

import numpy as np

MAGIC_TILT_AXIS = [float(np.sqrt(2.0 / 3.0)), 0.0, float(np.sqrt(1.0 / 3.0))]

# Alanine, centred, Angstrom. 15N first, then the two amine H, H-alpha, the
# three methyl H and the carboxyl H. Standard bond lengths and tetrahedral
# angles; largest internuclear distance 4.8 A.
ALANINE = [
    ["15N", [1.381, 0.082, -0.363]],
    ["1H", [1.718, -0.432, -1.164]],
    ["1H", [1.718, 1.034, -0.408]],
    ["1H", [-0.062, -0.273, 1.762]],
    ["1H", [-0.452, -0.431, -1.253]],
    ["1H", [-1.665, -0.446, 1.008]],
    ["1H", [-0.434, -1.711, 0.781]],
    ["1H", [-2.203, 2.177, -0.363]],
]
# N, both amine H and H-alpha
ALANINE_FRAGMENT = [ALANINE[i] for i in (0, 1, 2, 3)]

_NV = {"position": [0.0, 0.0, -20.0], "axis": MAGIC_TILT_AXIS}

PRESETS: dict[str, dict] = {
    "two-h": {
        "description": "two 1H at 1.5 A, dipolar doublet versus field orientation",
        "nuclei": [["1H", [0.0, 0.0, 0.0]], ["1H", [1.5, 0.0, 0.0]]],
        "nv": {"position": [0.0, 0.0, -20.0], "axis": [0.0, 0.0, 1.0]},
        "field": {"magnitude": 1000.0},
        "protocol": {"kind": "anglesweep", "sweep_count": 37},
        "grid": {"n": 1024, "total_time": 2.048},
    },
    "h-p": {
        "description": "1H-31P pair at 2 A, COSY read out on 1H",
        "nuclei": [["1H", [0.0, 0.0, 0.0]], ["31P", [2.0, 0.0, 0.0]]],
        "nv": _NV,
        "field": {"magnitude": 1000.0, "omega_f": 200.0},
        "protocol": {"kind": "cosy", "readout_species": "1H"},
        "grid": {"n": 256, "total_time": 0.5},
    },
    "h-n": {
        "description": "Alanine 15N and H-alpha (2.6 A, weakly coupled), COSY Larmor anchors",
        "nuclei": [["15N", ALANINE[0][1]], ["1H", ALANINE[3][1]]],
        "nv": _NV,
        "field": {"magnitude": 1000.0, "omega_f": 200.0},
        "protocol": {"kind": "cosy", "readout_species": "1H"},
        "grid": {"n": 256, "total_time": 1.0},
    },
    "alanine-fragment": {
        "description": "Alanine N, amine H and H-alpha; COSY tuned to 15N, completion test system",
        "nuclei": ALANINE_FRAGMENT,
        "nv": _NV,
        "field": {"magnitude": 1000.0, "omega_f": 200.0},
        "protocol": {"kind": "cosy", "readout_species": "15N"},
        "grid": {"n": 128, "dt": 1.0 / 208.0},
        "sampling": {"rate": 0.05, "seed": 1},
    },
    "alanine-strong": {
        "description": "Alanine fragment, unpolarized nuclei, strong-coupling sequence tuned to 15N at 100 G",
        "nuclei": ALANINE_FRAGMENT,
        "nv": _NV,
        "field": {"magnitude": 100.0, "omega_f": 20.0},
        "protocol": {"kind": "strong", "target_species": "15N"},
        "grid": {"n": 128, "dt": 1.0 / 160.0},
    },
    "alanine-full": {
        "description": "full Alanine (15N + 7 1H), 1024 x 1024 COSY tuned to 15N at 5 % sampling",
        "large": True,
        "nuclei": ALANINE,
        "nv": _NV,
        "field": {"magnitude": 1000.0, "omega_f": 200.0},
        "protocol": {"kind": "cosy", "readout_species": "15N"},
        "grid": {"n": 1024, "dt": 1.0 / 208.0},
        "sampling": {"rate": 0.05, "seed": 1},
    },
}


def get_preset(name: str) -> dict:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None


def sweep_directions(pair_axis, count: int) -> list[np.ndarray]:
    """``count`` field directions from parallel to antiparallel to ``pair_axis``, in a fixed plane."""
    u = np.asarray(pair_axis, dtype=float)
    u = u / np.linalg.norm(u)
    ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    perp = ref - (ref @ u) * u
    perp /= np.linalg.norm(perp)
    return [np.cos(t) * u + np.sin(t) * perp for t in np.linspace(0.0, np.pi, count)]


def alias_separation(larmor_khz, fs: float) -> float:
    """Smallest gap (kHz) between folded Larmor lines, DC and Nyquist at sample rate ``fs``."""
    from .spectra import alias_fold

    pts = sorted([alias_fold(f, fs) for f in larmor_khz] + [0.0, fs / 2])
    return float(np.min(np.diff(pts)))


def choose_sample_rate(larmor_khz, lo: float, hi: float, step: float = 0.5) -> float:
    """Sample rate in [lo, hi] kHz maximizing :func:`alias_separation`."""
    grid = np.arange(lo, hi + step / 2, step)
    seps = [alias_separation(larmor_khz, fs) / fs for fs in grid]
    return float(grid[int(np.argmax(seps))])
