"""Binary and text serialization of signal matrices.

Binary layout (little-endian)::

    magic     4 bytes  b"NVSM"
    n         uint32
    flags     uint32   bit 0: mask block present; bit 1: dt trailer present
    reserved  uint32   zero
    values    n*n float64, row-major (t1 rows, t2 columns); NaN marks unobserved
    mask      n*n uint8 (bit 0)
    dt        float64, ms (bit 1)

Values are written bit-exactly, so a round trip reproduces every entry, NaN
payloads included.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .protocols import SignalMatrix

MAGIC = b"NVSM"
_HEADER = struct.Struct("<4sIII")
FLAG_MASK = 1
FLAG_DT = 2


class FormatError(ValueError):
    pass


def write_signal(path: str | Path, signal: SignalMatrix) -> None:
    n = signal.n
    flags = FLAG_DT | (FLAG_MASK if signal.mask is not None else 0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, flags, 0))
        fh.write(np.ascontiguousarray(signal.values, dtype="<f8").tobytes())
        if flags & FLAG_MASK:
            fh.write(np.ascontiguousarray(signal.mask, dtype=np.uint8).tobytes())
        fh.write(struct.pack("<d", float(signal.dt)))


def read_signal(path: str | Path, dt: float | None = None) -> SignalMatrix:
    """Read a binary signal matrix; ``dt`` is required when the file carries no dt trailer."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, flags, _ = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a signal matrix file (magic {magic!r})")
    if flags & ~(FLAG_MASK | FLAG_DT):
        raise FormatError(f"{path}: unknown flags {flags:#x}")
    body = n * n * 8
    mask_size = n * n if flags & FLAG_MASK else 0
    expected = _HEADER.size + body + mask_size + (8 if flags & FLAG_DT else 0)
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f8", count=n * n, offset=_HEADER.size).reshape(n, n).astype(float)
    mask = None
    if flags & FLAG_MASK:
        raw = np.frombuffer(blob, dtype=np.uint8, count=n * n, offset=_HEADER.size + body)
        if np.any(raw > 1):
            raise FormatError(f"{path}: mask bytes must be 0 or 1")
        mask = raw.reshape(n, n).astype(bool)
    if flags & FLAG_DT:
        (dt,) = struct.unpack_from("<d", blob, _HEADER.size + body + mask_size)
    elif dt is None:
        raise FormatError(f"{path}: no dt stored; pass dt explicitly")
    sig = SignalMatrix.__new__(SignalMatrix)
    # bypass __post_init__ so stored values (including NaN payloads) stay untouched
    sig.values, sig.dt, sig.mask = values, float(dt), mask
    sig.protocol, sig.config_hash, sig.evaluations, sig.extras = "", "", 0, {}
    return sig


def write_signal_tsv(path: str | Path, signal: SignalMatrix) -> None:
    """Tab-separated grid with a ``# dt_ms=`` header; unobserved entries as ``nan``."""
    with open(path, "w") as fh:
        fh.write(f"# dt_ms={signal.dt!r}\n")
        np.savetxt(fh, signal.values, delimiter="\t", fmt="%.17g")


def read_signal_tsv(path: str | Path) -> SignalMatrix:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# dt_ms="):
            raise FormatError(f"{path}: missing '# dt_ms=' header")
        dt = float(first.split("=", 1)[1])
        values = np.loadtxt(fh, delimiter="\t", ndmin=2)
    mask = ~np.isnan(values)
    return SignalMatrix(values, dt, None if mask.all() else mask)
