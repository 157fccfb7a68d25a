import numpy as np
import pytest

from qpat.acoustics import DetectorArray, TimeSeries
from qpat.errors import ConfigurationError
from qpat.recon import (ReconConfig, analytic_signal, bandpass_filter,
                        crop_center, das_reconstruct, interpolate, reconstruct)

C = 1.497  # mm/us


def make_ts(data, dt=0.02, t0=0.0, positions=None):
    data = np.asarray(data, dtype=float)
    if positions is None:
        ang = np.linspace(0.0, 2 * np.pi, data.shape[0], endpoint=False)
        positions = 40.5 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return TimeSeries(data=data, dt_us=dt, t0_us=t0, positions_mm=positions)


def tone(freq_mhz, n=4001, dt=0.02):
    # n chosen so both endpoints are exact zero crossings for integer
    # freq_mhz/0.5: avoids reflection-padding discontinuities in filtfilt
    t = np.arange(n) * dt
    return np.sin(2 * np.pi * freq_mhz * t)


def gaussian_pulse(t, t_center, f_mhz=2.0, sigma_us=0.25):
    return np.exp(-0.5 * ((t - t_center) / sigma_us) ** 2) * np.cos(
        2 * np.pi * f_mhz * (t - t_center))


class TestBandpass:
    def test_passband_pulse_preserved(self):
        # compact 1 MHz pulse well inside the band: essentially untouched
        t = np.arange(4001) * 0.02
        x = np.exp(-0.5 * ((t - 40.0) / 2.0) ** 2) * np.cos(2 * np.pi * (t - 40.0))
        ts = make_ts(np.stack([x, 2 * x]))
        out = bandpass_filter(ts).data
        assert abs(np.abs(out[0]).max() - np.abs(x).max()) / np.abs(x).max() < 0.01
        assert np.sqrt(np.mean((out[1] - 2 * x) ** 2)) < 0.01 * np.abs(x).max()

    def test_dc_offset_removed(self):
        ts = make_ts(np.full((3, 2048), 7.5))
        out = bandpass_filter(ts).data
        assert np.abs(out).max() < 1e-3 * 7.5

    def test_out_of_band_tone_suppressed(self):
        x = tone(20.0)  # above the 7 MHz cut, below Nyquist (25 MHz at dt=0.02)
        ts = make_ts(x[None, :])
        out = bandpass_filter(ts).data
        core = slice(500, -500)
        atten_db = 20 * np.log10(np.abs(out[0, core]).max() / np.abs(x[core]).max())
        assert atten_db < -40.0

    def test_high_cut_at_nyquist_rejected(self):
        ts = make_ts(np.zeros((2, 128)), dt=0.1)  # Nyquist 5 MHz
        with pytest.raises(ConfigurationError):
            bandpass_filter(ts, highcut_mhz=5.0)

    def test_zero_phase_no_delay(self):
        # a symmetric pulse must keep its peak sample after filtering
        t = np.arange(4096) * 0.02
        x = gaussian_pulse(t, t_center=40.0)
        out = bandpass_filter(make_ts(x[None, :])).data[0]
        assert abs(int(np.argmax(np.abs(out))) - int(np.argmax(np.abs(x)))) <= 1


class TestAnalyticSignal:
    def test_envelope_of_modulated_pulse_peaks_at_center(self):
        t = np.arange(4096) * 0.02
        x = gaussian_pulse(t, t_center=40.0)
        env = np.abs(analytic_signal(make_ts(x[None, :])).data[0])
        assert abs(t[np.argmax(env)] - 40.0) <= 0.02 + 1e-12

    def test_real_part_is_input(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 1024))
        out = analytic_signal(make_ts(x)).data
        assert np.allclose(out.real, x, atol=1e-9)

    def test_constant_tone_envelope_flat(self):
        x = tone(1.5, n=4096)
        env = np.abs(analytic_signal(make_ts(x[None, :])).data[0])
        core = slice(400, -400)
        assert np.all(np.abs(env[core] - 1.0) < 0.01)


class TestInterpolation:
    def test_time_upsampling_reproduces_original_samples(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 256))
        ts = make_ts(x, dt=0.06)
        out = interpolate(ts, time_factor=3, element_factor=1)
        assert out.dt_us == pytest.approx(0.02)
        assert out.n_samples == 768
        assert np.allclose(out.data[:, ::3], x, atol=1e-4)

    def test_element_doubling_inserts_exact_midpoint_traces(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((8, 64))
        out = interpolate(make_ts(x), time_factor=1, element_factor=2)
        assert out.n_elements == 15
        assert np.array_equal(out.data[0::2], x)
        assert np.allclose(out.data[1::2], 0.5 * (x[:-1] + x[1:]))

    def test_geometry_midpoints_used_for_positions(self):
        det = DetectorArray(n_elements=16, radius_mm=40.5, arc_span_deg=270.0)
        data = np.zeros((16, 32))
        ts = TimeSeries(data=data, dt_us=0.05, t0_us=0.0,
                        positions_mm=det.positions(), geometry=det)
        out = interpolate(ts, time_factor=1, element_factor=2)
        # virtual elements stay on the arc, not on the chords
        radii = np.hypot(out.positions_mm[:, 0], out.positions_mm[:, 1])
        assert np.allclose(radii, 40.5, atol=1e-9)
        assert np.allclose(out.positions_mm[0::2], det.positions(), atol=1e-9)

    def test_identity_factors_change_nothing(self):
        x = np.random.default_rng(0).standard_normal((4, 100))
        ts = make_ts(x)
        out = interpolate(ts, time_factor=1, element_factor=1)
        assert np.array_equal(out.data, x)
        assert out.dt_us == ts.dt_us

    def test_complex_input_supported(self):
        x = np.random.default_rng(5).standard_normal((4, 128))
        ts = analytic_signal(make_ts(x))
        out = interpolate(ts, time_factor=3, element_factor=2)
        assert np.iscomplexobj(out.data)
        assert out.data.shape == (7, 384)


def synthetic_point_traces(src_xy, positions, n=2200, dt=0.02, amplitude=1.0):
    """Ideal band-limited point-source traces: a modulated pulse delayed by
    the exact geometric time of flight to each element."""
    t = np.arange(n) * dt
    data = np.empty((positions.shape[0], n))
    for e, (ex, ey) in enumerate(positions):
        delay = np.hypot(src_xy[0] - ex, src_xy[1] - ey) / C
        data[e] = amplitude * gaussian_pulse(t, t_center=delay)
    return TimeSeries(data=data, dt_us=dt, t0_us=0.0, positions_mm=positions)


def pixel_center(ix, iy, n=300, fov=32.0):
    pitch = fov / n
    return ((ix - (n - 1) / 2.0) * pitch, (iy - (n - 1) / 2.0) * pitch)


class TestDas:
    def test_zero_input_gives_zero_image(self):
        det = DetectorArray(n_elements=32)
        ts = TimeSeries(data=np.zeros((32, 500)), dt_us=0.02, t0_us=0.0,
                        positions_mm=det.positions(), geometry=det)
        img = das_reconstruct(ts, grid_size=64, fov_mm=16.0, sound_speed=C)
        assert np.all(img.data == 0)

    def test_point_source_localized_on_pixel_center(self):
        det = DetectorArray(n_elements=128, radius_mm=40.5, arc_span_deg=270.0)
        src = pixel_center(158, 137)  # exact pixel centre of the 300-grid
        ts = synthetic_point_traces(src, det.positions())
        ts = analytic_signal(ts)
        img = das_reconstruct(ts, grid_size=300, fov_mm=32.0, sound_speed=C)
        gx, gy = img.argmax_mm()
        pitch = img.pixel_pitch_mm
        assert abs(gx - src[0]) <= 2 * pitch + 1e-9
        assert abs(gy - src[1]) <= 2 * pitch + 1e-9

    def test_translation_of_source_moves_peak(self):
        det = DetectorArray(n_elements=96, radius_mm=40.5, arc_span_deg=270.0)
        for ix, iy in [(120, 150), (180, 120)]:
            src = pixel_center(ix, iy)
            ts = analytic_signal(synthetic_point_traces(src, det.positions()))
            img = das_reconstruct(ts, grid_size=300, fov_mm=32.0, sound_speed=C)
            gx, gy = img.argmax_mm()
            p = img.pixel_pitch_mm
            assert np.hypot(gx - src[0], gy - src[1]) <= 2 * p * np.sqrt(2)

    def test_amplitude_linearity(self):
        det = DetectorArray(n_elements=48, radius_mm=40.5)
        src = pixel_center(150, 150)
        ts1 = analytic_signal(synthetic_point_traces(src, det.positions(), amplitude=1.0))
        ts3 = analytic_signal(synthetic_point_traces(src, det.positions(), amplitude=3.0))
        img1 = das_reconstruct(ts1, grid_size=100, fov_mm=20.0, sound_speed=C)
        img3 = das_reconstruct(ts3, grid_size=100, fov_mm=20.0, sound_speed=C)
        assert np.allclose(img3.data, 3.0 * img1.data, rtol=1e-9, atol=1e-12)

    def test_delays_outside_window_contribute_zero(self):
        det = DetectorArray(n_elements=16, radius_mm=40.5)
        # window far too short for any pixel: all delays > n*dt
        ts = TimeSeries(data=np.ones((16, 8)), dt_us=0.02, t0_us=0.0,
                        positions_mm=det.positions(), geometry=det)
        img = das_reconstruct(ts, grid_size=32, fov_mm=16.0, sound_speed=C)
        assert np.all(img.data == 0)

    def test_localization_robust_to_noise(self):
        det = DetectorArray(n_elements=96, radius_mm=40.5, arc_span_deg=270.0)
        src = pixel_center(158, 137)
        ts = synthetic_point_traces(src, det.positions())
        noisy = ts.data + 0.05 * np.random.default_rng(7).standard_normal(ts.data.shape)
        ts = TimeSeries(data=noisy, dt_us=ts.dt_us, t0_us=ts.t0_us,
                        positions_mm=ts.positions_mm)
        img = das_reconstruct(analytic_signal(ts), grid_size=300, fov_mm=32.0,
                              sound_speed=C)
        gx, gy = img.argmax_mm()
        p = img.pixel_pitch_mm
        assert np.hypot(gx - src[0], gy - src[1]) <= 2 * p * np.sqrt(2)


class TestCropAndChain:
    def test_crop_keeps_world_coordinates(self):
        rng = np.random.default_rng(2)
        img = das_reconstruct(
            analytic_signal(make_ts(rng.standard_normal((16, 1500)))),
            grid_size=300, fov_mm=32.0, sound_speed=C)
        crop = crop_center(img, 288)
        assert crop.shape == (288, 288)
        xs_full, ys_full = img.pixel_coords()
        xs_c, ys_c = crop.pixel_coords()
        assert np.allclose(xs_c, xs_full[6:294], atol=1e-12)
        assert np.allclose(ys_c, ys_full[6:294], atol=1e-12)
        assert np.array_equal(crop.data, img.data[6:294, 6:294])

    def test_crop_larger_than_image_rejected(self):
        img = das_reconstruct(
            analytic_signal(make_ts(np.zeros((8, 100)))),
            grid_size=64, fov_mm=16.0, sound_speed=C)
        with pytest.raises(ConfigurationError):
            crop_center(img, 65)

    def test_full_chain_localizes_point_source(self):
        det = DetectorArray(n_elements=64, radius_mm=40.5, arc_span_deg=270.0)
        src = pixel_center(158, 137)
        ts = synthetic_point_traces(src, det.positions(), n=740, dt=0.06)
        cfg = ReconConfig()
        img = reconstruct(ts, cfg)
        assert img.shape == (288, 288)
        gx, gy = img.argmax_mm()
        assert np.hypot(gx - src[0], gy - src[1]) <= 2 * cfg.pixel_pitch_mm * np.sqrt(2)
