"""Command-line interface.

One subcommand per pipeline stage plus full-pipeline and scenario runners.
Exit codes: 0 success, 2 configuration error, 3 numerical error, 4 I/O error.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (AggregationError, ConfigurationError, DomainError,
                     FitError, NoConvergenceError, NumericalInstabilityError,
                     QpatError)
from .pipeline import (PipelineConfig, derive_seed, resample_fluence_slice,
                       run_pipeline, scenario_depth_decorrelation)
from .phantom import (PhantomSpec, VoxelGrid, assign_properties, rasterize,
                      sample_phantom)
from .photon import compute_p0, simulate_fluence
from .quant import (ChromophoreBasis, LinearMap, apply_calibration,
                    fluence_correct, linear_unmix_so2)
from .recon import ReconImage, reconstruct
from .slab import DISMeasurement, ad_inverse
from .volio import (load_image, load_timeseries, load_volume, read_csv,
                    save_image, save_timeseries, save_volume, write_pgm)

NUMERICAL_ERRORS = (DomainError, NumericalInstabilityError, NoConvergenceError,
                    FitError, AggregationError)


def _load_config(args):
    if getattr(args, "config", None):
        config = PipelineConfig.from_json_file(args.config)
    else:
        config = PipelineConfig()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _apply_threads(args):
    threads = getattr(args, "threads", None)
    if threads is None:
        return
    if threads < 1:
        raise ConfigurationError(f"--threads must be >= 1, got {threads}")
    import numba
    numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


def _out_dir(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_recon_image_file(path):
    data, meta = load_image(path)
    return ReconImage(data=data.astype(np.float64),
                      pixel_pitch_mm=meta["pixel_pitch_mm"],
                      center_mm=tuple(meta["center_mm"]))


def cmd_phantom(args):
    config = _load_config(args)
    out = _out_dir(args)
    for index in range(args.count):
        seed = derive_seed(config.seed, "phantom", index)
        spec = sample_phantom(seed, config.sampler, phantom_id=f"p{index:03d}")
        path = out / f"p{index:03d}.json"
        spec.save(path)
        print(path)
    return 0


def cmd_fluence(args):
    config = _load_config(args)
    _apply_threads(args)
    out = _out_dir(args)
    spec = PhantomSpec.load(args.phantom)
    grid = config.grid()
    labels = rasterize(spec, grid)
    props = assign_properties(spec, labels, args.wavelength)
    n_photons = args.photons if args.photons else config.n_photons
    seed = derive_seed(config.seed, "transport", Path(args.phantom).stem,
                       args.wavelength)
    result = simulate_fluence(props, grid, config.illumination(), n_photons, seed)
    path = out / f"{Path(args.phantom).stem}_w{args.wavelength:g}.bin"
    save_volume(path, result.phi, grid.spacing_mm, grid.origin_mm,
                extra={"kind": "fluence", "wavelength_nm": args.wavelength,
                       "n_photons": n_photons, "seed": seed})
    print(path)
    return 0


def cmd_acoustic(args):
    from .acoustics import add_noise, embed_in_water_canvas, simulate_forward
    config = _load_config(args)
    _apply_threads(args)
    out = _out_dir(args)
    spec = PhantomSpec.load(args.phantom)
    phi, meta = load_volume(args.fluence)
    spacing = tuple(meta["spacing_mm"])
    origin = tuple(meta["origin_mm"])
    grid = VoxelGrid(dims=(phi.shape[2], phi.shape[1], phi.shape[0]),
                     spacing_mm=spacing, origin_mm=origin)
    labels = rasterize(spec, grid)
    props = assign_properties(spec, labels, args.wavelength)
    p0 = compute_p0(phi.astype(np.float64), props)
    stem = Path(args.fluence).stem
    p0_path = out / f"{stem}_p0.bin"
    save_volume(p0_path, p0, spacing, origin, extra={"kind": "p0"})

    detectors = config.detectors()
    p0_slice = p0[p0.shape[0] // 2]
    canvas, medium = embed_in_water_canvas(p0_slice, spacing[0],
                                           (origin[0], origin[1]), detectors,
                                           pml_size=config.pml_size)
    ts = simulate_forward(canvas, medium, detectors, dt_us=config.dt_us,
                          n_steps=config.n_steps, pml_size=config.pml_size,
                          pml_alpha=config.pml_alpha)
    if config.noise_sigma > 0:
        noise_seed = derive_seed(config.seed, "noise", stem)
        ts = add_noise(ts, config.noise_sigma * float(np.abs(ts.data).max()),
                       noise_seed)
    ts_path = out / f"{stem}_ts.bin"
    save_timeseries(ts_path, ts.data, ts.dt_us, ts.t0_us, ts.positions_mm)
    print(p0_path)
    print(ts_path)
    return 0


def cmd_reconstruct(args):
    from .acoustics import TimeSeries
    config = _load_config(args)
    out = _out_dir(args)
    data, meta = load_timeseries(args.timeseries)
    detectors = config.detectors()
    if data.shape[0] != detectors.n_elements:
        raise ConfigurationError(
            f"time series has {data.shape[0]} elements but the configured "
            f"array has {detectors.n_elements}")
    ts = TimeSeries(data=data.astype(np.float64), dt_us=meta["dt_us"],
                    t0_us=meta["t0_us"], positions_mm=detectors.positions(),
                    geometry=detectors)
    img = reconstruct(ts, config.recon)
    stem = Path(args.timeseries).stem
    path = out / f"{stem}_recon.bin"
    save_image(path, img.data, img.pixel_pitch_mm, img.center_mm,
               extra={"kind": "envelope"})
    write_pgm(out / f"{stem}_recon.pgm", img.data)
    print(path)
    return 0


def _load_linear_map(path):
    doc = json.loads(Path(path).read_text())
    try:
        return LinearMap(slope=float(doc["slope"]),
                         intercept=float(doc["intercept"]))
    except KeyError as err:
        raise ConfigurationError(
            f"{path}: calibration JSON needs slope and intercept") from err


def cmd_estimate(args):
    out = _out_dir(args)
    img = _load_recon_image_file(args.image)
    cal = _load_linear_map(args.calibration)
    if args.method == "cal":
        mu_map = apply_calibration(img.data, cal)
    else:
        if not args.fluence:
            raise ConfigurationError("--method gtphi needs --fluence")
        phi, meta = load_volume(args.fluence)
        phi_px = resample_fluence_slice(phi, tuple(meta["spacing_mm"]),
                                        tuple(meta["origin_mm"]), img)
        mu_map = fluence_correct(img.data, phi_px, scale=cal.slope,
                                 offset=cal.intercept)
    path = out / f"{Path(args.image).stem}_mua_{args.method}.bin"
    save_image(path, mu_map, img.pixel_pitch_mm, img.center_mm,
               extra={"kind": f"mu_a_{args.method}", "units": "1/cm"})
    print(path)
    return 0


def cmd_unmix(args):
    out = _out_dir(args)
    wavelengths = [float(w) for w in args.wavelengths.split(",")]
    paths = args.images
    if len(paths) != len(wavelengths):
        raise ConfigurationError(
            f"{len(paths)} images vs {len(wavelengths)} wavelengths")
    stacks, pitch, center = [], None, None
    for path in paths:
        img = _load_recon_image_file(path)
        stacks.append(img.data)
        pitch, center = img.pixel_pitch_mm, img.center_mm
    basis = ChromophoreBasis.hemoglobin(wavelengths)
    so2 = linear_unmix_so2(stacks, basis)
    path = out / "so2.bin"
    save_image(path, so2, pitch, center, extra={"kind": "so2"})
    print(path)
    return 0


def cmd_iad(args):
    measurement = DISMeasurement(reflectance=args.reflectance,
                                 transmittance=args.transmittance)
    result = ad_inverse(measurement, args.thickness_mm, g=args.g, n=args.n)
    doc = {"mu_a_per_mm": result.mu_a_per_mm,
           "mu_s_prime_per_mm": result.mu_s_prime_per_mm,
           "residual": result.residual}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(out)
    else:
        print(text)
    return 0


def cmd_pipeline(args):
    config = _load_config(args)
    _apply_threads(args)
    if not args.out:
        raise ConfigurationError("pipeline needs --out")
    manifest = run_pipeline(config, args.out, resume=not args.no_resume)
    print(f"manifest {manifest.manifest_hash}")
    print(f"artifacts {len(manifest.artifacts)}")
    return 0


def cmd_evaluate(args):
    config = _load_config(args)
    _apply_threads(args)
    if not args.out:
        raise ConfigurationError("evaluate needs --out (the run directory)")
    run_pipeline(config, args.out, resume=True)
    summary = Path(args.out) / "reports/summary.csv"
    for row in read_csv(summary):
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_scenario(args):
    config = _load_config(args)
    _apply_threads(args)
    if not args.out:
        raise ConfigurationError("scenario needs --out")
    if args.name != "depth-decorrelation":
        raise ConfigurationError(f"unknown scenario {args.name!r}")
    rows, _ = scenario_depth_decorrelation(
        args.n_phantoms, config.seed, args.out, n_photons=args.photons)
    print(Path(args.out) / "depth_decorrelation.csv")
    print(f"bins {len(rows)}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qpat",
        description="Photoacoustic imaging digital twin: forward simulation, "
                    "reconstruction, and quantification.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common],
                       help="sample random phantom specs")
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fluence", parents=[common],
                       help="Monte Carlo fluence for one phantom")
    p.add_argument("--phantom", required=True)
    p.add_argument("--wavelength", type=float, default=700.0)
    p.add_argument("--photons", type=lambda s: int(float(s)))
    p.set_defaults(func=cmd_fluence)

    p = sub.add_parser("acoustic", parents=[common],
                       help="initial pressure and detector time series")
    p.add_argument("--phantom", required=True)
    p.add_argument("--fluence", required=True)
    p.add_argument("--wavelength", type=float, default=700.0)
    p.set_defaults(func=cmd_acoustic)

    p = sub.add_parser("reconstruct", parents=[common],
                       help="delay-and-sum image from a time series")
    p.add_argument("--timeseries", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("estimate", parents=[common],
                       help="absorption map from a reconstructed image")
    p.add_argument("--method", choices=("cal", "gtphi"), required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--calibration", required=True,
                   help="JSON file with slope and intercept")
    p.add_argument("--fluence", help="fluence volume (gtphi only)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("unmix", parents=[common],
                       help="sO2 map from multispectral absorption maps")
    p.add_argument("--wavelengths", required=True,
                   help="comma-separated wavelengths in nm")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_unmix)

    p = sub.add_parser("iad", parents=[common],
                       help="invert slab reflectance/transmittance to optics")
    p.add_argument("--reflectance", type=float, required=True)
    p.add_argument("--transmittance", type=float, required=True)
    p.add_argument("--thickness-mm", type=float, required=True)
    p.add_argument("--g", type=float, default=0.7)
    p.add_argument("--n", type=float, default=1.4)
    p.set_defaults(func=cmd_iad)

    p = sub.add_parser("evaluate", parents=[common],
                       help="re-derive reports for a pipeline run directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", parents=[common],
                       help="run the full forward + quantification chain")
    p.add_argument("--no-resume", action="store_true",
                   help="recompute everything, ignoring existing artifacts")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("scenario", parents=[common],
                       help="reproduce a named study")
    p.add_argument("name")
    p.add_argument("--n-phantoms", type=int, default=10)
    p.add_argument("--photons", type=lambda s: int(float(s)), default=500_000)
    p.set_defaults(func=cmd_scenario)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 4
    except QpatError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
