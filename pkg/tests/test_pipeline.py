"""Pipeline orchestration: config parsing, staged execution, resume, reports."""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from qpat.errors import ConfigurationError
from qpat.phantom import sample_phantom, SamplerConfig
from qpat.pipeline import (PipelineConfig, RunManifest, depth_correlation_rows,
                           depth_profile, derive_seed, resample_fluence_slice,
                           run_pipeline, scenario_depth_decorrelation)
from qpat.recon import ReconConfig, ReconImage
from qpat.volio import file_digest, read_csv


def toy_config(**overrides):
    """Coarse, fast settings: 28.8 mm cube at 0.6 mm voxels, short wave run."""
    base = dict(seed=7, n_phantoms=3, n_train=2, grid_dims=(48, 48, 48),
                voxel_mm=0.6, n_photons=20000, dt_us=0.1, n_steps=380,
                recon=ReconConfig(grid_size=100, crop_size=96, highcut_mhz=4.0))
    base.update(overrides)
    return PipelineConfig(**base)


class TestConfig:
    def test_dict_round_trip(self):
        cfg = toy_config(wavelengths_nm=(700.0, 850.0), noise_sigma=0.01)
        doc = json.loads(json.dumps(cfg.to_dict()))
        assert PipelineConfig.from_dict(doc).to_dict() == cfg.to_dict()

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_dict({"photons": 5})

    def test_unknown_nested_keys_rejected(self):
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_dict({"acoustics": {"dt": 0.05}})
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_dict({"phantoms": {"sampler": {"radius": 3}}})
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_dict({"recon": {"fov": 32}})

    def test_cfl_violation_rejected(self):
        with pytest.raises(ConfigurationError):
            toy_config(dt_us=0.3).validate()

    def test_highcut_beyond_nyquist_rejected(self):
        # dt 0.1 us -> Nyquist 5 MHz; default 7 MHz high cut cannot work
        with pytest.raises(ConfigurationError):
            toy_config(recon=ReconConfig(grid_size=100, crop_size=96)).validate()

    def test_training_split_validated(self):
        with pytest.raises(ConfigurationError):
            toy_config(n_train=1).validate()
        with pytest.raises(ConfigurationError):
            toy_config(n_phantoms=2, n_train=2).validate()
        # without estimators no split is needed
        toy_config(n_phantoms=1, n_train=0, estimators=()).validate()

    def test_unknown_estimator_rejected(self):
        with pytest.raises(ConfigurationError):
            toy_config(estimators=("deep",)).validate()

    def test_missing_phantom_paths_rejected(self):
        with pytest.raises(ConfigurationError):
            toy_config(phantom_paths=("/nonexistent/p.json",),
                       n_phantoms=1, n_train=0, estimators=()).validate()

    def test_derive_seed_stable_and_distinct(self):
        a = derive_seed(0, "phantom", 0)
        assert a == derive_seed(0, "phantom", 0)
        assert a != derive_seed(0, "phantom", 1)
        assert a != derive_seed(1, "phantom", 0)
        assert 0 <= a < 2 ** 63


class TestManifest:
    def test_save_load_round_trip(self, tmp_path):
        m = RunManifest(version="0.1.0", config={"seed": 1},
                        artifacts={"a": {"path": "a.bin", "sha256": "x",
                                         "stage_hash": "y"}},
                        wall_times_s={"a": 1.5})
        m.save(tmp_path / "m.json")
        m2 = RunManifest.load(tmp_path / "m.json")
        assert m2.artifacts == m.artifacts
        assert m2.manifest_hash == m.manifest_hash

    def test_wall_times_excluded_from_hash(self):
        m1 = RunManifest(version="0.1.0", config={}, wall_times_s={"a": 1.0})
        m2 = RunManifest(version="0.1.0", config={}, wall_times_s={"a": 9.0})
        assert m1.manifest_hash == m2.manifest_hash

    def test_artifacts_included_in_hash(self):
        m1 = RunManifest(version="0.1.0", config={})
        m2 = RunManifest(version="0.1.0", config={},
                         artifacts={"a": {"path": "p", "sha256": "s",
                                          "stage_hash": "h"}})
        assert m1.manifest_hash != m2.manifest_hash


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_run")
    manifest = run_pipeline(toy_config(), out)
    return toy_config(), out, manifest


class TestRunPipeline:
    def test_recon_cardinality(self, tmp_path):
        # 2 wavelengths x 3 phantoms -> 6 reconstructed images
        cfg = toy_config(wavelengths_nm=(700.0, 850.0), estimators=())
        manifest = run_pipeline(cfg, tmp_path)
        recon_keys = [k for k in manifest.artifacts if k.startswith("recon/")]
        assert len(recon_keys) == 6
        for key in recon_keys:
            assert (tmp_path / manifest.artifacts[key]["path"]).is_file()

    def test_same_config_same_manifest_hash(self, toy_run, tmp_path):
        cfg, _, manifest = toy_run
        again = run_pipeline(cfg, tmp_path)
        assert again.manifest_hash == manifest.manifest_hash

    def test_resume_skips_and_preserves_hash(self, toy_run):
        cfg, out, manifest = toy_run
        again = run_pipeline(cfg, out)
        assert again.manifest_hash == manifest.manifest_hash
        # skipped stages reload fast; nothing recomputed means digests intact
        for key, rec in manifest.artifacts.items():
            assert again.artifacts[key]["sha256"] == rec["sha256"]

    def test_resume_recomputes_deleted_artifact_bit_identical(self, toy_run):
        cfg, out, manifest = toy_run
        key = "recon/p001_w700"
        target = out / manifest.artifacts[key]["path"]
        original_digest = manifest.artifacts[key]["sha256"]
        target.unlink()
        again = run_pipeline(cfg, out)
        assert (out / manifest.artifacts[key]["path"]).is_file()
        assert again.artifacts[key]["sha256"] == original_digest
        assert again.manifest_hash == manifest.manifest_hash

    def test_config_change_invalidates_downstream_only(self, toy_run, tmp_path):
        cfg, out, manifest = toy_run
        import shutil
        clone = tmp_path / "clone"
        shutil.copytree(out, clone)
        changed = dataclasses.replace(
            cfg, recon=dataclasses.replace(cfg.recon, highcut_mhz=3.0))
        again = run_pipeline(changed, clone)
        # upstream artifacts reused bit-identically, recon re-derived
        for key, rec in manifest.artifacts.items():
            if key.split("/")[0] in ("phantom", "fluence", "p0", "timeseries"):
                assert again.artifacts[key]["sha256"] == rec["sha256"]
        assert (again.artifacts["recon/p000_w700"]["sha256"]
                != manifest.artifacts["recon/p000_w700"]["sha256"])

    def test_stage_failure_recorded_and_partial_artifacts_kept(
            self, tmp_path, monkeypatch):
        import qpat.pipeline as pl
        calls = []

        def boom(ts, config):
            calls.append(1)
            raise ValueError("synthetic reconstruction failure")

        monkeypatch.setattr(pl, "reconstruct", boom)
        with pytest.raises(ValueError):
            run_pipeline(toy_config(), tmp_path)
        manifest = RunManifest.load(tmp_path / "manifest.json")
        assert manifest.failed_stage == "recon/p000_w700"
        # stages before the failure persisted their artifacts
        assert "fluence/p000_w700" in manifest.artifacts
        path = tmp_path / manifest.artifacts["timeseries/p000_w700"]["path"]
        assert path.is_file()

    def test_reports_written(self, toy_run):
        _, out, manifest = toy_run
        rows = read_csv(out / "reports/estimates.csv")
        assert rows, "estimates.csv must not be empty"
        expected = {"phantom_id", "wavelength_nm", "region_id", "kind",
                    "estimator", "split", "estimate", "reference",
                    "rel_err", "abs_err"}
        assert expected <= set(rows[0])
        splits = {row["split"] for row in rows}
        assert splits == {"train", "test"}
        estimators = {row["estimator"] for row in rows}
        assert estimators == {"calibration", "fluence"}
        summary = read_csv(out / "reports/summary.csv")
        assert {row["estimator"] for row in summary} >= {"calibration", "fluence"}
        cal_doc = json.loads((out / "reports/calibrations.json").read_text())
        assert "calibration/700" in cal_doc and "fluence/700" in cal_doc


class TestFluenceResampling:
    def test_linear_field_reproduced_exactly(self):
        # phi(x, y) = 2x + 3y + 10 on the volume; bilinear interpolation of a
        # linear field is exact at interior pixel centres
        nz, ny, nx = 4, 30, 30
        spacing = (1.0, 1.0, 1.0)
        origin = (-15.0, -15.0, -2.0)
        xs = origin[0] + (np.arange(nx) + 0.5) * spacing[0]
        ys = origin[1] + (np.arange(ny) + 0.5) * spacing[1]
        phi = np.broadcast_to(2.0 * xs[None, None, :] + 3.0 * ys[None, :, None]
                              + 10.0, (nz, ny, nx)).copy()
        img = ReconImage(data=np.zeros((20, 20)), pixel_pitch_mm=0.5,
                         center_mm=(0.0, 0.0))
        out = resample_fluence_slice(phi, spacing, origin, img)
        px, py = img.pixel_coords()
        expected = 2.0 * px[None, :] + 3.0 * py[:, None] + 10.0
        assert np.allclose(out, expected, atol=1e-12)


def homogeneous_specs(n, seed0=100):
    cfg = SamplerConfig(inclusion_count=(0, 0))
    return [sample_phantom(seed0 + i, cfg) for i in range(n)]


def synthetic_images(specs, signal_of):
    """Images whose value at each pixel depends on (depth, mu_a_bg)."""
    images = []
    for spec in specs:
        mu = spec.materials["background"].mu_a.at(800.0)
        img = ReconImage(data=np.zeros((96, 96)), pixel_pitch_mm=0.3,
                         center_mm=(0.0, 0.0))
        xs, ys = img.pixel_coords()
        r = np.hypot(xs[None, :], ys[:, None])
        depth = spec.shape_for_label(1).radius_mm - r
        data = np.where(depth >= 0, signal_of(depth, mu), 0.0)
        images.append(ReconImage(data=data, pixel_pitch_mm=0.3,
                                 center_mm=(0.0, 0.0)))
    return images


class TestDepthCorrelation:
    def test_profile_bins_and_values(self):
        specs = homogeneous_specs(1)
        images = synthetic_images(specs, lambda d, mu: np.floor(d))
        centers, means = depth_profile(images[0], specs[0])
        assert np.all(np.diff(centers) == pytest.approx(1.0))
        assert centers[0] == pytest.approx(0.5)
        # bin [k, k+1) of floor(depth) is exactly k
        assert np.allclose(means, np.floor(centers), atol=1e-12)

    def test_perfectly_correlated_signal(self):
        specs = homogeneous_specs(10)
        images = synthetic_images(
            specs, lambda d, mu: mu * np.exp(-d / 5.0) + 0.01)
        rows = depth_correlation_rows(images, specs, 800.0)
        assert len(rows) >= 12
        for row in rows:
            assert row["pearson_r"] == pytest.approx(1.0, abs=1e-9)

    def test_decorrelating_signal(self):
        # signal carries mu_a at the surface, pure phantom-to-phantom clutter
        # at depth: r must fall from ~1 toward ~0
        specs = homogeneous_specs(10)
        rng = np.random.default_rng(5)
        clutter = {id(s): rng.uniform(0.5, 1.0) for s in specs}
        images = []
        for spec in specs:
            mu = spec.materials["background"].mu_a.at(800.0)
            base = ReconImage(data=np.zeros((96, 96)), pixel_pitch_mm=0.3,
                              center_mm=(0.0, 0.0))
            xs, ys = base.pixel_coords()
            r = np.hypot(xs[None, :], ys[:, None])
            depth = spec.shape_for_label(1).radius_mm - r
            w = np.clip(depth / 10.0, 0.0, 1.0)
            data = np.where(depth >= 0,
                            (1 - w) * mu + w * clutter[id(spec)], 0.0)
            images.append(ReconImage(data=data, pixel_pitch_mm=0.3,
                                     center_mm=(0.0, 0.0)))
        rows = depth_correlation_rows(images, specs, 800.0)
        shallow = rows[0]["pearson_r"]
        deep = [row for row in rows if row["depth_mm"] >= 11.0]
        assert shallow > 0.95
        assert all(abs(row["pearson_r"]) < 0.5 for row in deep)

    def test_scenario_requires_ten_phantoms(self, tmp_path):
        with pytest.raises(ConfigurationError):
            scenario_depth_decorrelation(5, 0, tmp_path)


class TestScenarioToyRun:
    def test_csv_matches_direct_recomputation(self, tmp_path):
        cfg = toy_config(n_phantoms=10, n_train=0, estimators=(),
                         sampler=SamplerConfig(inclusion_count=(0, 0)),
                         n_photons=8000)
        rows, manifest = scenario_depth_decorrelation(
            10, cfg.seed, tmp_path, config=cfg)
        saved = read_csv(tmp_path / "depth_decorrelation.csv")
        assert len(saved) == len(rows) >= 10
        # two ways: pipeline-written CSV vs recomputation from the persisted
        # images; both must agree to full precision
        from qpat.pipeline import _load_recon_image
        from qpat.phantom import PhantomSpec
        images = [_load_recon_image(tmp_path / f"recon/p{i:03d}_w700.bin")
                  for i in range(10)]
        specs = [PhantomSpec.load(tmp_path / f"phantoms/p{i:03d}.json")
                 for i in range(10)]
        direct = depth_correlation_rows(images, specs, 700.0)
        assert len(direct) == len(saved)
        for srow, drow in zip(saved, direct):
            assert float(srow["depth_mm"]) == pytest.approx(
                drow["depth_mm"], abs=0)
            assert float(srow["pearson_r"]) == pytest.approx(
                drow["pearson_r"], abs=1e-12)
            assert -1.0 <= drow["pearson_r"] <= 1.0
