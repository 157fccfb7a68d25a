"""Staged forward-chain orchestration with persisted, resumable artifacts.

One run walks phantom -> fluence -> initial pressure -> acoustics -> image
reconstruction -> absorption estimation -> evaluation, writing every stage
product to disk in the documented formats. Each artifact is keyed by a hash
of everything upstream of it, so re-running with an unchanged configuration
skips completed stages, and any persisted artifact can seed a resumed run
with bit-identical downstream results (downstream stages always consume the
persisted file, never in-memory intermediates).
"""

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage

from . import __version__
from .acoustics import (DetectorArray, TimeSeries, add_noise,
                        embed_in_water_canvas, simulate_forward,
                        WATER_SOUND_SPEED, MAX_CFL)
from .errors import ConfigurationError
from .metrics import gcnr, pearson_r, rel_error, summarize
from .phantom import (PhantomSpec, SamplerConfig, VoxelGrid, assign_properties,
                      rasterize, reference_mu_a_per_mm, sample_phantom,
                      slice_region_masks, BACKGROUND_LABEL)
from .photon import IlluminationGeometry, compute_p0, simulate_fluence
from .quant import (aggregate_region, apply_calibration,
                    fit_fluence_calibration, fit_image_calibration,
                    fluence_correct)
from .recon import ReconConfig, ReconImage, reconstruct
from .volio import (canonical_json, config_hash, file_digest, load_image,
                    load_timeseries, load_volume, read_csv, save_image,
                    save_timeseries, save_volume, write_csv)

ESTIMATOR_NAMES = ("calibration", "fluence")
PER_CM = 10.0  # mm^-1 -> cm^-1


def derive_seed(*parts):
    """Stable 63-bit stream seed from labeled run coordinates."""
    return int(config_hash({"parts": list(parts)})[:16], 16) & (2 ** 63 - 1)


def _section(doc, key, allowed):
    sub = doc.get(key, {})
    if not isinstance(sub, dict):
        raise ConfigurationError(f"config section {key!r} must be a mapping")
    unknown = set(sub) - set(allowed)
    if unknown:
        raise ConfigurationError(
            f"unknown keys in config section {key!r}: {sorted(unknown)}")
    return sub


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    wavelengths_nm: tuple = (700.0,)
    n_phantoms: int = 3
    n_train: int = 2
    phantom_paths: tuple = ()
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    grid_dims: tuple = (96, 96, 96)
    voxel_mm: float = 0.3
    n_photons: int = 1_000_000
    ring_pairs: int = 5
    ring_radius_mm: float = 22.0
    ring_axial_offset_mm: float = 3.0
    spot_radius_mm: float = 2.0
    divergence_deg: float = 10.0
    n_elements: int = 256
    detector_radius_mm: float = 40.5
    arc_span_deg: float = 270.0
    dt_us: float = 0.05
    n_steps: int = 760
    pml_size: int = 20
    pml_alpha: float = 1.0
    noise_sigma: float = 0.0
    recon: ReconConfig = field(default_factory=ReconConfig)
    estimators: tuple = ESTIMATOR_NAMES

    def __post_init__(self):
        object.__setattr__(self, "wavelengths_nm",
                           tuple(float(w) for w in self.wavelengths_nm))
        object.__setattr__(self, "phantom_paths",
                           tuple(str(p) for p in self.phantom_paths))
        object.__setattr__(self, "grid_dims", tuple(int(d) for d in self.grid_dims))
        object.__setattr__(self, "estimators", tuple(self.estimators))

    def validate(self):
        if not self.wavelengths_nm:
            raise ConfigurationError("need at least one wavelength")
        if self.phantom_paths:
            missing = [p for p in self.phantom_paths if not Path(p).is_file()]
            if missing:
                raise ConfigurationError(f"phantom spec files not found: {missing}")
            if len(self.phantom_paths) != self.n_phantoms:
                raise ConfigurationError(
                    f"{len(self.phantom_paths)} phantom paths vs "
                    f"n_phantoms={self.n_phantoms}")
        if self.n_phantoms < 1:
            raise ConfigurationError("need at least one phantom")
        if self.n_photons < 1:
            raise ConfigurationError("need at least one photon")
        for name in self.estimators:
            if name not in ESTIMATOR_NAMES:
                raise ConfigurationError(
                    f"unknown estimator {name!r}; choices: {ESTIMATOR_NAMES}")
        if self.estimators:
            if self.n_train < 2:
                raise ConfigurationError(
                    "estimator fitting needs n_train >= 2 training phantoms")
            if self.n_train >= self.n_phantoms:
                raise ConfigurationError(
                    "need at least one test phantom after the training split")
        cfl = WATER_SOUND_SPEED * self.dt_us / self.voxel_mm
        if cfl > MAX_CFL:
            raise ConfigurationError(
                f"dt {self.dt_us} us at {self.voxel_mm} mm voxels gives "
                f"CFL {cfl:.3f} > {MAX_CFL}")
        nyquist_mhz = 0.5 / self.dt_us
        if self.recon.highcut_mhz >= nyquist_mhz:
            raise ConfigurationError(
                f"recon high cut {self.recon.highcut_mhz} MHz reaches the "
                f"Nyquist frequency {nyquist_mhz} MHz of dt {self.dt_us} us")
        if len(self.grid_dims) != 3 or any(d < 8 for d in self.grid_dims):
            raise ConfigurationError(f"implausible grid dims {self.grid_dims}")
        self.sampler.validate()
        return self

    def grid(self):
        return VoxelGrid(dims=self.grid_dims,
                         spacing_mm=(self.voxel_mm,) * 3)

    def detectors(self):
        return DetectorArray(n_elements=self.n_elements,
                             radius_mm=self.detector_radius_mm,
                             arc_span_deg=self.arc_span_deg)

    def illumination(self):
        return IlluminationGeometry.ring(
            n_bundle_pairs=self.ring_pairs,
            ring_radius_mm=self.ring_radius_mm,
            axial_offset_mm=self.ring_axial_offset_mm,
            spot_radius_mm=self.spot_radius_mm,
            divergence_half_angle_deg=self.divergence_deg)

    def to_dict(self):
        return {
            "seed": self.seed,
            "wavelengths_nm": list(self.wavelengths_nm),
            "phantoms": {
                "count": self.n_phantoms,
                "train": self.n_train,
                "paths": list(self.phantom_paths),
                "sampler": {k: (list(v) if isinstance(v, tuple) else v)
                            for k, v in dataclasses.asdict(self.sampler).items()},
            },
            "grid": {"dims": list(self.grid_dims), "voxel_mm": self.voxel_mm},
            "transport": {
                "photons": self.n_photons,
                "illumination": {
                    "pairs": self.ring_pairs,
                    "ring_radius_mm": self.ring_radius_mm,
                    "axial_offset_mm": self.ring_axial_offset_mm,
                    "spot_radius_mm": self.spot_radius_mm,
                    "divergence_deg": self.divergence_deg,
                },
            },
            "acoustics": {
                "detectors": {
                    "n_elements": self.n_elements,
                    "radius_mm": self.detector_radius_mm,
                    "arc_deg": self.arc_span_deg,
                },
                "dt_us": self.dt_us,
                "n_steps": self.n_steps,
                "pml_size": self.pml_size,
                "pml_alpha": self.pml_alpha,
                "noise_sigma": self.noise_sigma,
            },
            "recon": dataclasses.asdict(self.recon),
            "quant": {"estimators": list(self.estimators)},
        }

    @classmethod
    def from_dict(cls, doc):
        """Fail-closed parse: any unknown key anywhere is an error."""
        if not isinstance(doc, dict):
            raise ConfigurationError("config document must be a mapping")
        top_allowed = {"seed", "wavelengths_nm", "phantoms", "grid",
                       "transport", "acoustics", "recon", "quant"}
        unknown = set(doc) - top_allowed
        if unknown:
            raise ConfigurationError(f"unknown top-level config keys: {sorted(unknown)}")
        kw = {}
        if "seed" in doc:
            kw["seed"] = int(doc["seed"])
        if "wavelengths_nm" in doc:
            kw["wavelengths_nm"] = tuple(doc["wavelengths_nm"])

        ph = _section(doc, "phantoms", {"count", "train", "paths", "sampler"})
        if "count" in ph:
            kw["n_phantoms"] = int(ph["count"])
        if "train" in ph:
            kw["n_train"] = int(ph["train"])
        if "paths" in ph:
            kw["phantom_paths"] = tuple(ph["paths"])
        sampler_fields = {f.name for f in dataclasses.fields(SamplerConfig)}
        sm = _section(ph, "sampler", sampler_fields)
        if sm:
            tupled = {k: (tuple(v) if isinstance(v, list) else v)
                      for k, v in sm.items()}
            kw["sampler"] = SamplerConfig(**tupled)

        gr = _section(doc, "grid", {"dims", "voxel_mm"})
        if "dims" in gr:
            kw["grid_dims"] = tuple(gr["dims"])
        if "voxel_mm" in gr:
            kw["voxel_mm"] = float(gr["voxel_mm"])

        tr = _section(doc, "transport", {"photons", "illumination"})
        if "photons" in tr:
            kw["n_photons"] = int(tr["photons"])
        il = _section(tr, "illumination",
                      {"pairs", "ring_radius_mm", "axial_offset_mm",
                       "spot_radius_mm", "divergence_deg"})
        for src, dst in [("pairs", "ring_pairs"), ("ring_radius_mm", "ring_radius_mm"),
                         ("axial_offset_mm", "ring_axial_offset_mm"),
                         ("spot_radius_mm", "spot_radius_mm"),
                         ("divergence_deg", "divergence_deg")]:
            if src in il:
                kw[dst] = il[src]

        ac = _section(doc, "acoustics",
                      {"detectors", "dt_us", "n_steps", "pml_size",
                       "pml_alpha", "noise_sigma"})
        de = _section(ac, "detectors", {"n_elements", "radius_mm", "arc_deg"})
        if "n_elements" in de:
            kw["n_elements"] = int(de["n_elements"])
        if "radius_mm" in de:
            kw["detector_radius_mm"] = float(de["radius_mm"])
        if "arc_deg" in de:
            kw["arc_span_deg"] = float(de["arc_deg"])
        for key in ("dt_us", "pml_alpha", "noise_sigma"):
            if key in ac:
                kw[key] = float(ac[key])
        for key in ("n_steps", "pml_size"):
            if key in ac:
                kw[key] = int(ac[key])

        recon_fields = {f.name for f in dataclasses.fields(ReconConfig)}
        rc = _section(doc, "recon", recon_fields)
        if rc:
            kw["recon"] = ReconConfig(**rc)

        qu = _section(doc, "quant", {"estimators"})
        if "estimators" in qu:
            kw["estimators"] = tuple(qu["estimators"])
        return cls(**kw)

    @classmethod
    def from_json_file(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigurationError(f"{path}: invalid JSON ({err})") from err
        return cls.from_dict(doc)


@dataclass
class RunManifest:
    version: str
    config: dict
    artifacts: dict = field(default_factory=dict)
    wall_times_s: dict = field(default_factory=dict)
    failed_stage: str = None

    @property
    def config_hash(self):
        return config_hash(self.config)

    @property
    def manifest_hash(self):
        """Covers config, seeds (inside config), version, and artifact
        digests; wall times deliberately excluded so timing jitter never
        changes the hash."""
        return config_hash({
            "version": self.version,
            "config_hash": self.config_hash,
            "artifacts": self.artifacts,
        })

    def to_dict(self):
        return {
            "version": self.version,
            "config": self.config,
            "config_hash": self.config_hash,
            "manifest_hash": self.manifest_hash,
            "artifacts": self.artifacts,
            "wall_times_s": self.wall_times_s,
            "failed_stage": self.failed_stage,
        }

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return Path(path)

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        return cls(version=doc["version"], config=doc["config"],
                   artifacts=doc.get("artifacts", {}),
                   wall_times_s=doc.get("wall_times_s", {}),
                   failed_stage=doc.get("failed_stage"))


class _Runner:
    """Executes stages, reusing persisted artifacts whose hashes still match."""

    def __init__(self, config, out_dir, resume=True):
        self.config = config
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(version=__version__, config=config.to_dict())
        self.previous = {}
        manifest_path = self.out / "manifest.json"
        if resume and manifest_path.is_file():
            try:
                self.previous = RunManifest.load(manifest_path).artifacts
            except (json.JSONDecodeError, KeyError):
                self.previous = {}

    def _reusable(self, key, stage_hash, path):
        record = self.previous.get(key)
        if record is None or record["stage_hash"] != stage_hash:
            return False
        return path.is_file() and file_digest(path) == record["sha256"]

    def ensure(self, key, stage_hash, relpath, compute_and_save, load):
        """Return the persisted artifact, computing it only when needed.

        The caller always receives `load(path)` output, so downstream stages
        see identical bits whether this stage ran or was skipped.
        """
        path = self.out / relpath
        started = time.perf_counter()
        try:
            if not self._reusable(key, stage_hash, path):
                path.parent.mkdir(parents=True, exist_ok=True)
                compute_and_save(path)
            self.manifest.artifacts[key] = {
                "path": str(relpath),
                "sha256": file_digest(path),
                "stage_hash": stage_hash,
            }
            self.manifest.wall_times_s[key] = round(time.perf_counter() - started, 6)
            self.manifest.save(self.out / "manifest.json")
            return load(path)
        except Exception:
            self.manifest.failed_stage = key
            self.manifest.save(self.out / "manifest.json")
            raise


def _phantom_stage(runner, index):
    cfg = runner.config
    pid = f"p{index:03d}"
    if cfg.phantom_paths:
        source = Path(cfg.phantom_paths[index])
        stage_hash = config_hash({"stage": "phantom", "source": file_digest(source)})

        def compute(path):
            path.write_text(source.read_text())
    else:
        seed = derive_seed(cfg.seed, "phantom", index)
        stage_hash = config_hash({
            "stage": "phantom", "seed": seed,
            "sampler": runner.manifest.config["phantoms"]["sampler"]})

        def compute(path):
            spec = sample_phantom(seed, cfg.sampler, phantom_id=pid)
            spec.save(path)

    spec = runner.ensure(f"phantom/{pid}", stage_hash, f"phantoms/{pid}.json",
                         compute, PhantomSpec.load)
    return pid, spec, stage_hash


def _fluence_stage(runner, pid, spec, phantom_hash, wavelength, labels):
    cfg = runner.config
    grid = cfg.grid()
    seed = derive_seed(cfg.seed, "transport", pid, wavelength)
    stage_hash = config_hash({
        "stage": "fluence", "phantom": phantom_hash, "wavelength": wavelength,
        "grid": runner.manifest.config["grid"],
        "transport": runner.manifest.config["transport"], "seed": seed})
    tag = f"{pid}_w{wavelength:g}"

    def compute(path):
        props = assign_properties(spec, labels, wavelength)
        result = simulate_fluence(props, grid, cfg.illumination(),
                                  cfg.n_photons, seed)
        save_volume(path, result.phi, grid.spacing_mm, grid.origin_mm,
                    extra={"kind": "fluence", "wavelength_nm": wavelength,
                           "n_photons": cfg.n_photons, "seed": seed})

    phi, _ = runner.ensure(f"fluence/{tag}", stage_hash, f"fluence/{tag}.bin",
                           compute, load_volume)
    return phi, stage_hash


def _p0_stage(runner, pid, spec, fluence_hash, wavelength, labels, phi):
    cfg = runner.config
    grid = cfg.grid()
    stage_hash = config_hash({"stage": "p0", "fluence": fluence_hash})
    tag = f"{pid}_w{wavelength:g}"

    def compute(path):
        props = assign_properties(spec, labels, wavelength)
        p0 = compute_p0(phi.astype(np.float64), props)
        save_volume(path, p0, grid.spacing_mm, grid.origin_mm,
                    extra={"kind": "p0", "wavelength_nm": wavelength})

    p0, _ = runner.ensure(f"p0/{tag}", stage_hash, f"p0/{tag}.bin",
                          compute, load_volume)
    return p0, stage_hash


def _timeseries_stage(runner, pid, p0_hash, wavelength, p0):
    cfg = runner.config
    grid = cfg.grid()
    detectors = cfg.detectors()
    noise_seed = derive_seed(cfg.seed, "noise", pid, wavelength)
    stage_hash = config_hash({
        "stage": "timeseries", "p0": p0_hash,
        "acoustics": runner.manifest.config["acoustics"],
        "noise_seed": noise_seed})
    tag = f"{pid}_w{wavelength:g}"
    iz = cfg.grid_dims[2] // 2

    def compute(path):
        p0_slice = p0[iz]
        canvas, medium = embed_in_water_canvas(
            p0_slice, cfg.voxel_mm,
            (grid.origin_mm[0], grid.origin_mm[1]), detectors,
            pml_size=cfg.pml_size)
        ts = simulate_forward(canvas, medium, detectors, dt_us=cfg.dt_us,
                              n_steps=cfg.n_steps, pml_size=cfg.pml_size,
                              pml_alpha=cfg.pml_alpha)
        if cfg.noise_sigma > 0:
            peak = float(np.abs(ts.data).max())
            ts = add_noise(ts, cfg.noise_sigma * peak, noise_seed)
        save_timeseries(path, ts.data, ts.dt_us, ts.t0_us, ts.positions_mm,
                        extra={"wavelength_nm": wavelength})

    def load(path):
        data, meta = load_timeseries(path)
        return TimeSeries(data=data.astype(np.float64), dt_us=meta["dt_us"],
                          t0_us=meta["t0_us"],
                          positions_mm=detectors.positions(),
                          geometry=detectors)

    ts = runner.ensure(f"timeseries/{tag}", stage_hash, f"timeseries/{tag}.bin",
                       compute, load)
    return ts, stage_hash


def _recon_stage(runner, pid, ts_hash, wavelength, ts):
    cfg = runner.config
    stage_hash = config_hash({"stage": "recon", "timeseries": ts_hash,
                              "recon": runner.manifest.config["recon"]})
    tag = f"{pid}_w{wavelength:g}"

    def compute(path):
        img = reconstruct(ts, cfg.recon)
        save_image(path, img.data, img.pixel_pitch_mm, img.center_mm,
                   extra={"kind": "envelope", "wavelength_nm": wavelength})

    img = runner.ensure(f"recon/{tag}", stage_hash, f"recon/{tag}.bin",
                        compute, _load_recon_image)
    return img, stage_hash


def _load_recon_image(path):
    data, meta = load_image(path)
    return ReconImage(data=data.astype(np.float64),
                      pixel_pitch_mm=meta["pixel_pitch_mm"],
                      center_mm=tuple(meta["center_mm"]))


def resample_fluence_slice(phi, spacing_mm, origin_mm, img):
    """Bilinear resample of the axial-center fluence slice onto image pixels.

    `phi` is a [z, y, x] volume; `origin_mm` is the corner of voxel (0,0,0),
    so voxel centers sit at origin + (index + 1/2) * spacing.
    """
    iz = phi.shape[0] // 2
    phi_slice = np.asarray(phi[iz], dtype=np.float64)
    xs, ys = img.pixel_coords()
    cols = (xs - (origin_mm[0] + 0.5 * spacing_mm[0])) / spacing_mm[0]
    rows = (ys - (origin_mm[1] + 0.5 * spacing_mm[1])) / spacing_mm[1]
    c2, r2 = np.meshgrid(cols, rows)
    return scipy.ndimage.map_coordinates(phi_slice, [r2, c2], order=1,
                                         mode="constant", cval=0.0)


def _estimate_stage(runner, records, train_ids):
    """Fit estimators on the training phantoms, apply everywhere."""
    cfg = runner.config
    grid = cfg.grid()
    z_mm = float(grid.axis_centers(2)[cfg.grid_dims[2] // 2])
    calibrations = {}
    fit_inputs_hash = config_hash({"train": sorted(
        rec["recon_hash"] + rec["fluence_hash"]
        for rec in records if rec["pid"] in train_ids)})

    for wavelength in cfg.wavelengths_nm:
        train = [rec for rec in records
                 if rec["pid"] in train_ids and rec["wavelength"] == wavelength]
        mu_bg = [reference_mu_a_per_mm(rec["spec"], BACKGROUND_LABEL, wavelength)
                 * PER_CM for rec in train]
        bg_masks = [slice_region_masks(rec["spec"], *rec["img"].pixel_coords(),
                                       z_mm=z_mm)[BACKGROUND_LABEL]
                    for rec in train]
        if "calibration" in cfg.estimators:
            calibrations[("calibration", wavelength)] = fit_image_calibration(
                [rec["img"].data for rec in train], bg_masks, mu_bg)
        if "fluence" in cfg.estimators:
            phis = [resample_fluence_slice(rec["phi"], grid.spacing_mm,
                                           grid.origin_mm, rec["img"])
                    for rec in train]
            calibrations[("fluence", wavelength)] = fit_fluence_calibration(
                [rec["img"].data for rec in train], phis, bg_masks, mu_bg)

    cal_doc = {f"{est}/{wl:g}": dataclasses.asdict(cal)
               for (est, wl), cal in calibrations.items()}
    cal_hash = config_hash({"stage": "calibrations", "fits": fit_inputs_hash,
                            "estimators": list(cfg.estimators)})
    runner.ensure("estimate/calibrations", cal_hash, "reports/calibrations.json",
                  lambda path: path.write_text(canonical_json(cal_doc)),
                  lambda path: json.loads(path.read_text()))

    maps = {}
    for rec in records:
        for est in cfg.estimators:
            cal = calibrations[(est, rec["wavelength"])]
            tag = f"{rec['pid']}_w{rec['wavelength']:g}"
            stage_hash = config_hash({
                "stage": "estimate", "estimator": est, "cal": cal_hash,
                "recon": rec["recon_hash"], "fluence": rec["fluence_hash"]})

            def compute(path, rec=rec, est=est, cal=cal):
                if est == "calibration":
                    mu_map = apply_calibration(rec["img"].data, cal)
                else:
                    phi_px = resample_fluence_slice(
                        rec["phi"], grid.spacing_mm, grid.origin_mm, rec["img"])
                    mu_map = fluence_correct(rec["img"].data, phi_px,
                                             scale=cal.slope, offset=cal.intercept)
                save_image(path, mu_map, rec["img"].pixel_pitch_mm,
                           rec["img"].center_mm,
                           extra={"kind": f"mu_a_{est}", "units": "1/cm"})

            data, _ = runner.ensure(f"estimate/{est}/{tag}", stage_hash,
                                    f"quant/{est}/{tag}.bin", compute, load_image)
            maps[(rec["pid"], rec["wavelength"], est)] = data.astype(np.float64)
    return maps


def _evaluate_stage(runner, records, maps, train_ids):
    cfg = runner.config
    grid = cfg.grid()
    z_mm = float(grid.axis_centers(2)[cfg.grid_dims[2] // 2])
    est_rows, gcnr_rows = [], []

    for rec in records:
        masks = slice_region_masks(rec["spec"], *rec["img"].pixel_coords(),
                                   z_mm=z_mm)
        pitch = rec["img"].pixel_pitch_mm
        split = "train" if rec["pid"] in train_ids else "test"
        regions = [(BACKGROUND_LABEL, "background", "background")]
        regions += [(lbl, f"inclusion_{lbl}", "inclusion")
                    for lbl in rec["spec"].inclusion_labels
                    if lbl in masks and masks[lbl].any()]
        def add_gcnr(estimator, values_map):
            # contrast of each inclusion against the background, computed on
            # whichever map the row is labelled with; invalid pixels excluded
            bg_vals = values_map[masks[BACKGROUND_LABEL]]
            bg_vals = bg_vals[np.isfinite(bg_vals)]
            for label, region_id, region_kind in regions:
                if region_kind != "inclusion":
                    continue
                inc_vals = values_map[masks[label]]
                inc_vals = inc_vals[np.isfinite(inc_vals)]
                if inc_vals.size == 0 or bg_vals.size == 0:
                    continue
                gcnr_rows.append({
                    "phantom_id": rec["pid"], "wavelength_nm": rec["wavelength"],
                    "split": split, "region_id": region_id,
                    "estimator": estimator, "gcnr": gcnr(inc_vals, bg_vals)})

        for est in cfg.estimators:
            mu_map = maps[(rec["pid"], rec["wavelength"], est)]
            for label, region_id, region_kind in regions:
                reference = reference_mu_a_per_mm(
                    rec["spec"], label, rec["wavelength"]) * PER_CM
                estimate = aggregate_region(mu_map, masks[label], region_kind,
                                            pixel_pitch_mm=pitch)
                est_rows.append({
                    "phantom_id": rec["pid"], "wavelength_nm": rec["wavelength"],
                    "region_id": region_id, "kind": region_kind,
                    "estimator": est, "split": split,
                    "estimate": estimate, "reference": reference,
                    "rel_err": rel_error(reference, estimate),
                    "abs_err": abs(estimate - reference)})
            add_gcnr(est, mu_map)
        add_gcnr("envelope", rec["img"].data)

    summary_rows = []
    for est in list(cfg.estimators) + ["envelope"]:
        test = [r for r in est_rows if r["estimator"] == est and r["split"] == "test"]
        inc = [r for r in test if r["kind"] == "inclusion"]
        bg = [r for r in test if r["kind"] == "background"]
        row = {"estimator": est,
               "n_inclusions": len(inc), "n_backgrounds": len(bg)}
        if bg:
            row["median_rel_err_background_pct"] = summarize(
                [r["rel_err"] for r in bg])[0]
        if inc:
            row["median_rel_err_inclusion_pct"] = summarize(
                [r["rel_err"] for r in inc])[0]
            try:
                row["pearson_r_inclusion"] = pearson_r(
                    [r["reference"] for r in inc],
                    [r["estimate"] for r in inc])
            except Exception:
                row["pearson_r_inclusion"] = ""
        test_gcnr = [r["gcnr"] for r in gcnr_rows
                     if r["estimator"] == est and r["split"] == "test"]
        if test_gcnr:
            row["median_gcnr_inclusion"] = summarize(test_gcnr)[0]
            row["n_gcnr"] = len(test_gcnr)
        if bg or inc or test_gcnr:
            summary_rows.append(row)

    stage_hash = config_hash({
        "stage": "evaluate",
        "sources": sorted(runner.manifest.artifacts[k]["stage_hash"]
                          for k in runner.manifest.artifacts
                          if k.startswith(("estimate/", "recon/")))})

    def write_rows(rows, fieldnames):
        def compute(path, rows=rows, fieldnames=fieldnames):
            write_csv(path, rows, fieldnames)
        return compute

    est_fields = ["phantom_id", "wavelength_nm", "region_id", "kind",
                  "estimator", "split", "estimate", "reference",
                  "rel_err", "abs_err"]
    runner.ensure("report/estimates", stage_hash, "reports/estimates.csv",
                  write_rows(est_rows, est_fields), read_csv)
    if gcnr_rows:
        gcnr_fields = ["phantom_id", "wavelength_nm", "split", "region_id",
                       "estimator", "gcnr"]
        runner.ensure("report/gcnr", stage_hash, "reports/gcnr.csv",
                      write_rows(gcnr_rows, gcnr_fields), read_csv)
    sum_fields = sorted({k for row in summary_rows for k in row})
    runner.ensure("report/summary", stage_hash, "reports/summary.csv",
                  write_rows(summary_rows, sum_fields), read_csv)


def run_pipeline(config, out_dir, resume=True):
    """Execute the full chain; returns the RunManifest (also saved to disk).

    With resume=True (default), artifacts persisted by a previous run in the
    same directory are reused whenever their stage hashes match the current
    configuration.
    """
    config.validate()
    runner = _Runner(config, out_dir, resume=resume)
    records = []
    train_ids = set()
    for index in range(config.n_phantoms):
        pid, spec, phantom_hash = _phantom_stage(runner, index)
        if index < config.n_train:
            train_ids.add(pid)
        labels = rasterize(spec, config.grid())
        for wavelength in config.wavelengths_nm:
            phi, fl_hash = _fluence_stage(runner, pid, spec, phantom_hash,
                                          wavelength, labels)
            p0, p0_hash = _p0_stage(runner, pid, spec, fl_hash, wavelength,
                                    labels, phi)
            ts, ts_hash = _timeseries_stage(runner, pid, p0_hash, wavelength, p0)
            img, rc_hash = _recon_stage(runner, pid, ts_hash, wavelength, ts)
            records.append({"pid": pid, "spec": spec, "wavelength": wavelength,
                            "phi": phi, "img": img, "recon_hash": rc_hash,
                            "fluence_hash": fl_hash})
    if config.estimators:
        maps = _estimate_stage(runner, records, train_ids)
        _evaluate_stage(runner, records, maps, train_ids)
    runner.manifest.save(runner.out / "manifest.json")
    return runner.manifest


def depth_profile(image, spec, bin_width_mm=1.0):
    """Mean image signal per depth bin, depth measured inward from the
    background cylinder surface. Returns (bin_centers_mm, means)."""
    cylinder = spec.shape_for_label(BACKGROUND_LABEL)
    radius = cylinder.radius_mm
    xs, ys = image.pixel_coords()
    x2, y2 = np.meshgrid(xs - cylinder.center_mm[0], ys - cylinder.center_mm[1])
    depth = radius - np.hypot(x2, y2)
    inside = depth >= 0
    edges = np.arange(0.0, radius + bin_width_mm, bin_width_mm)
    centers, means = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = inside & (depth >= lo) & (depth < hi)
        if sel.sum() < 8:  # the innermost sliver is too small to average
            continue
        centers.append(0.5 * (lo + hi))
        means.append(float(image.data[sel].mean()))
    return np.array(centers), np.array(means)


def depth_correlation_rows(images, specs, wavelength_nm, bin_width_mm=1.0):
    """Across-phantom correlation of depth-binned signal with background
    absorption; one row per depth bin present in every phantom."""
    mu_bg = [reference_mu_a_per_mm(spec, BACKGROUND_LABEL, wavelength_nm)
             for spec in specs]
    profiles = [dict(zip(*depth_profile(img, spec, bin_width_mm)))
                for img, spec in zip(images, specs)]
    common = sorted(set.intersection(*[set(p) for p in profiles]))
    rows = []
    for depth in common:
        signals = [prof[depth] for prof in profiles]
        rows.append({"depth_mm": float(depth),
                     "pearson_r": pearson_r(signals, mu_bg)})
    return rows


def scenario_depth_decorrelation(n_phantoms, seed, out_dir, n_photons=500_000,
                                 config=None, resume=True):
    """Homogeneous-phantom study: how image signal decorrelates from the
    true background absorption with depth. Writes depth_decorrelation.csv."""
    if n_phantoms < 10:
        raise ConfigurationError("depth scenario needs >= 10 phantoms")
    if config is None:
        sampler = SamplerConfig(inclusion_count=(0, 0))
        config = PipelineConfig(seed=seed, n_phantoms=n_phantoms, n_train=0,
                                sampler=sampler, estimators=(),
                                n_photons=n_photons)
    manifest = run_pipeline(config, out_dir, resume=resume)
    out = Path(out_dir)
    wavelength = config.wavelengths_nm[0]
    images, specs = [], []
    for index in range(config.n_phantoms):
        pid = f"p{index:03d}"
        specs.append(PhantomSpec.load(out / f"phantoms/{pid}.json"))
        images.append(_load_recon_image(out / f"recon/{pid}_w{wavelength:g}.bin"))
    rows = depth_correlation_rows(images, specs, wavelength)
    write_csv(out / "depth_decorrelation.csv", rows, ["depth_mm", "pearson_r"])
    return rows, manifest
