"""Command-line entry point: ``nv2dnmr {validate,run,complete,spectrum,compare}``.

Exit codes: 0 success, 2 configuration error, 3 completion did not converge
(outputs are still written and flagged), 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .completion import SVTConfig, make_peak_weight, optimal_alpha, svt_complete, weighted_frobenius_error
from .config import ConfigError, ExperimentConfig, load_config
from .io import FormatError, read_signal, write_signal
from .protocols import ConfigurationError, SignalMatrix, run_angle_sweep, run_cosy, run_strong_coupling
from .spectra import (
    MaskedInputError,
    dft2,
    dominant_cross_bin,
    find_peaks,
    write_peaks,
    write_pgm,
    write_tsv,
)

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("nv2dnmr")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _threads(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("NV2DNMR_THREADS")
    return max(1, int(env)) if env else 1


def cost_estimate(cfg: ExperimentConfig) -> str:
    n = cfg["grid"]["n"]
    points = int(round(n * n * cfg["sampling"]["rate"]))
    dim = 2 ** len(cfg.nuclei())
    if cfg.kind == "strong":
        dim *= 2
    flops = n * 2.0 * dim**3 * 4 + points * 8.0 * dim**2
    # ~1 GFLOP/s effective for complex dense kernels on a single core
    return (
        f"{points} grid points, Hilbert dimension {dim}, ~{flops:.2e} complex operations "
        f"(roughly {flops / 1e9 / 60:.1f} min single-threaded)"
    )


class Manifest:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.out = out
        self.data = {
            "config_hash": cfg.digest,
            "config_source": cfg.source,
            "preset": cfg["preset"],
            "version": __version__,
            "status": "running",
            "flags": [],
            "timings_s": {},
            "outputs": [],
        }
        self._t0 = time.perf_counter()

    def stage(self, name: str):
        manifest = self

        class _Stage:
            def __enter__(self):
                self.t = time.perf_counter()
                log.info("stage %s", name)

            def __exit__(self, exc_type, exc, tb):
                manifest.data["timings_s"][name] = round(time.perf_counter() - self.t, 6)
                if exc_type is not None:
                    manifest.data["status"] = f"failed in stage {name}: {exc}"
                    manifest.write()
                return False

        return _Stage()

    def add(self, path: Path) -> None:
        self.data["outputs"].append({"file": path.name, "sha256": _sha256(path)})

    def write(self) -> Path:
        self.data["wall_clock_s"] = round(time.perf_counter() - self._t0, 6)
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2) + "\n")
        return path


def _larmor_mhz(cfg: ExperimentConfig) -> list[float]:
    fld = cfg.field_config()
    seen = {}
    for nuc in cfg.nuclei():
        seen.setdefault(nuc.species, fld.larmor(nuc.gamma) / 1e3)
    return list(seen.values())


def write_spectrum_outputs(signal: SignalMatrix, out: Path, window, rel_threshold, larmor=None, prefix="spectrum"):
    spec = dft2(signal, window=window)
    files = []
    mag = spec.folded_magnitude()
    p = out / f"{prefix}.tsv"
    write_tsv(p, mag)
    files.append(p)
    p = out / f"{prefix}.pgm"
    write_pgm(p, mag)
    files.append(p)
    peaks = find_peaks(spec, rel_threshold, larmor=larmor)
    p = out / "peaks.tsv"
    write_peaks(p, peaks)
    files.append(p)
    return spec, peaks, files


def run(cfg: ExperimentConfig, threads: int = 1, large: bool = False, out: Path | None = None) -> tuple[dict, int]:
    """Execute the configured experiment; returns (manifest dict, exit code).

    Outputs go to ``out``, else ``NV2DNMR_OUTPUT_DIR``, else the config's ``output``.
    """
    if cfg["large"] and not large:
        raise ConfigError("large", f"preset is gated; rerun with --large. Estimated cost: {cost_estimate(cfg)}")
    out = Path(out) if out is not None else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(cfg, out)
    code = EXIT_OK
    (out / "config.resolved.yaml").write_text(cfg.to_yaml())
    man.add(out / "config.resolved.yaml")
    system, fld = cfg.system(), cfg.field_config()

    if cfg.kind == "anglesweep":
        with man.stage("simulate"):
            g = cfg["grid"]
            points = run_angle_sweep(system, fld.magnitude, cfg.sweep_directions(), n=g["n"], total_time=cfg.dt * g["n"])
        path = out / "sweep.tsv"
        rows = ["# theta_deg\tbx\tby\tbz\tsplitting_kHz\tresolution_kHz\tresolved\texpected_kHz"]
        for pt in points:
            rows.append(
                f"{np.degrees(pt.theta):.6f}\t{pt.direction[0]:.9f}\t{pt.direction[1]:.9f}\t{pt.direction[2]:.9f}\t"
                f"{pt.splitting:.6f}\t{pt.resolution:.6f}\t{str(pt.resolved).lower()}\t{pt.expected:.6f}"
            )
        path.write_text("\n".join(rows) + "\n")
        man.add(path)
    else:
        grid = cfg.grid_spec()
        with man.stage("simulate"):
            if cfg.kind == "cosy":
                signal = run_cosy(system, fld, grid, settings=cfg.cosy_settings(), threads=threads)
            else:
                signal = run_strong_coupling(system, fld, grid, settings=cfg.strong_settings(), threads=threads)
            signal.config_hash = cfg.digest
        man.data["evaluations"] = signal.evaluations
        path = out / "signal.bin"
        write_signal(path, signal)
        man.add(path)
        if "max_abs_sz" in signal.extras:
            man.data["max_abs_sz"] = signal.extras["max_abs_sz"]
        full = signal
        if not signal.is_complete:
            with man.stage("complete"):
                report = svt_complete(signal, cfg=cfg.svt_config())
            full = SignalMatrix(report.completed, signal.dt, protocol=signal.protocol, config_hash=cfg.digest)
            path = out / "completed.bin"
            write_signal(path, full)
            man.add(path)
            path = out / "completion.txt"
            report.write(path)
            man.add(path)
            if not report.converged:
                man.data["flags"].append(
                    f"completion not converged after {report.iterations} iterations (residual {report.residual:.3e})"
                )
                code = EXIT_NONCONVERGED
        with man.stage("spectrum"):
            _, peaks, files = write_spectrum_outputs(
                full, out, cfg["spectrum"]["window"], cfg["spectrum"]["rel_threshold"], _larmor_mhz(cfg)
            )
        for f in files:
            man.add(f)
    man.data["status"] = "complete" if code == EXIT_OK else "complete (flagged)"
    man.write()
    return man.data, code


def _load_run_signal(path: Path) -> SignalMatrix:
    """A run directory (completed.bin preferred) or a signal file."""
    if path.is_dir():
        for name in ("completed.bin", "signal.bin"):
            if (path / name).is_file():
                return read_signal(path / name)
        raise FileNotFoundError(f"{path}: no signal.bin or completed.bin")
    return read_signal(path)


def compare(reference: SignalMatrix, others: dict[str, SignalMatrix], halo: int = 1, rel_threshold: float = 0.1):
    """Error table of each run against ``reference`` on their 2D spectra."""
    spec_r = dft2(reference)
    n = reference.n
    w = make_peak_weight(find_peaks(spec_r, rel_threshold), n, halo)
    k_ref = dominant_cross_bin(spec_r)
    rows = []
    for name, sig in others.items():
        if sig.n != n:
            raise ValueError(f"{name}: grid {sig.n} does not match the reference grid {n}")
        spec_c = dft2(sig)
        k = dominant_cross_bin(spec_c)
        rows.append(
            {
                "run": name,
                "eps_weighted": weighted_frobenius_error(spec_c.data, spec_r.data, w),
                "eps_unweighted": weighted_frobenius_error(spec_c.data, spec_r.data),
                "alpha": optimal_alpha(spec_c.data, spec_r.data),
                "cross_bin": k,
                "cross_bin_delta": int(max(abs(k[0] - k_ref[0]), abs(k[1] - k_ref[1]))),
            }
        )
    return rows


def _format_table(rows) -> str:
    lines = ["run\teps_weighted\teps_unweighted\talpha\tcross_bin\tcross_bin_delta"]
    for r in rows:
        lines.append(
            f"{r['run']}\t{r['eps_weighted']:.6e}\t{r['eps_unweighted']:.6e}\t{r['alpha']:.6f}\t"
            f"{r['cross_bin'][0]},{r['cross_bin'][1]}\t{r['cross_bin_delta']}"
        )
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ argparse


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nv2dnmr", description="NV-detected 2D NMR simulation and analysis")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("config", nargs="?", help="YAML config file")
        p.add_argument("--preset", help="start from a named preset instead of (or under) a config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--large", action="store_true", help="allow gated large presets")

    p = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    config_args(p)
    p = sub.add_parser("run", help="run an experiment")
    config_args(p)
    p.add_argument("--out", help="output directory (overrides config and NV2DNMR_OUTPUT_DIR)")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("complete", help="complete a masked signal file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--report", help="write the completion report here")
    p.add_argument("--threshold", type=float)
    p.add_argument("--step", type=float, default=1.2)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--rank-cap", type=int)

    p = sub.add_parser("spectrum", help="2D spectrum, heat map and peak list of a complete signal file")
    p.add_argument("input")
    p.add_argument("outdir")
    p.add_argument("--window", choices=["hann"])
    p.add_argument("--rel-threshold", type=float, default=0.1)
    p.add_argument("--larmor", type=float, nargs="*", help="true Larmor frequencies (MHz) for harmonic labels")

    p = sub.add_parser("compare", help="error table of runs against a reference run")
    p.add_argument("reference", help="run directory or signal file")
    p.add_argument("runs", nargs="+")
    p.add_argument("--halo", type=int, default=1)
    p.add_argument("--rel-threshold", type=float, default=0.1)
    p.add_argument("--out", help="also write the table to this TSV file")
    return ap


def _config_from_args(args) -> ExperimentConfig:
    tree = {"preset": args.preset} if args.preset else None
    if args.config is None and tree is None:
        raise ConfigError("<args>", "give a config file or --preset")
    if args.config is not None and args.preset:
        args.overrides.insert(0, f"preset={args.preset}")
    return load_config(args.config, tree=tree, overrides=args.overrides)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            cfg = _config_from_args(args)
            if cfg["large"]:
                print(f"# gated preset (--large); estimated cost: {cost_estimate(cfg)}", file=sys.stderr)
            print(f"# config hash {cfg.digest}")
            sys.stdout.write(cfg.to_yaml())
            return EXIT_OK
        if args.command == "run":
            cfg = _config_from_args(args)
            if cfg["large"]:
                print(f"estimated cost: {cost_estimate(cfg)}", file=sys.stderr)
            out = Path(args.out) if args.out else cfg.output_dir()
            manifest, code = run(cfg, _threads(args.threads), args.large, out)
            print(f"{manifest['status']}: {len(manifest['outputs'])} outputs in {out}")
            for flag in manifest["flags"]:
                print(f"warning: {flag}", file=sys.stderr)
            return code
        if args.command == "complete":
            sig = read_signal(args.input)
            cfg = SVTConfig(
                threshold=args.threshold, step=args.step, max_iters=args.max_iters, tol=args.tol, rank_cap=args.rank_cap
            )
            report = svt_complete(sig, cfg=cfg)
            write_signal(args.output, SignalMatrix(report.completed, sig.dt))
            if args.report:
                report.write(args.report)
            print(
                f"iterations {report.iterations}, residual {report.residual:.3e}, rank {report.rank}, "
                f"{'converged' if report.converged else 'NOT converged'}"
            )
            return EXIT_OK if report.converged else EXIT_NONCONVERGED
        if args.command == "spectrum":
            sig = read_signal(args.input)
            out = Path(args.outdir)
            out.mkdir(parents=True, exist_ok=True)
            _, peaks, files = write_spectrum_outputs(sig, out, args.window, args.rel_threshold, args.larmor)
            print(f"{len(peaks)} peaks; wrote {', '.join(f.name for f in files)}")
            return EXIT_OK
        if args.command == "compare":
            ref = _load_run_signal(Path(args.reference))
            others = {r: _load_run_signal(Path(r)) for r in args.runs}
            table = _format_table(compare(ref, others, args.halo, args.rel_threshold))
            sys.stdout.write(table)
            if args.out:
                Path(args.out).write_text(table)
            return EXIT_OK
    except (ConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MaskedInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
