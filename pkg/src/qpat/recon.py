"""Delay-and-sum image formation from ring-detector time series.

Processing chain (in order): zero-phase Butterworth bandpass, analytic
signal per channel, Fourier interpolation in time and linear interpolation
across elements, complex delay-and-sum onto a square grid, envelope by
magnitude, centre crop. Frequencies are MHz (time is microseconds).
"""

from dataclasses import dataclass, replace

import numpy as np
import scipy.signal

from .acoustics import TimeSeries, WATER_SOUND_SPEED
from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class ReconConfig:
    lowcut_mhz: float = 0.005  # 5 kHz
    highcut_mhz: float = 7.0
    filter_order: int = 3
    time_factor: int = 3
    element_factor: int = 2
    grid_size: int = 300
    fov_mm: float = 32.0
    crop_size: int = 288
    sound_speed: float = WATER_SOUND_SPEED

    @property
    def pixel_pitch_mm(self):
        return self.fov_mm / self.grid_size


@dataclass(frozen=True)
class ReconImage:
    """Square image; pixel (row, col) centre is at
    center + (col - (n-1)/2, row - (n-1)/2) * pitch."""

    data: np.ndarray
    pixel_pitch_mm: float
    center_mm: tuple = (0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DomainError(f"image must be 2-D, got {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "center_mm", tuple(float(c) for c in self.center_mm))

    @property
    def shape(self):
        return self.data.shape

    def pixel_coords(self):
        ny, nx = self.data.shape
        cx, cy = self.center_mm
        xs = cx + (np.arange(nx) - (nx - 1) / 2.0) * self.pixel_pitch_mm
        ys = cy + (np.arange(ny) - (ny - 1) / 2.0) * self.pixel_pitch_mm
        return xs, ys

    def argmax_mm(self):
        iy, ix = np.unravel_index(int(np.argmax(self.data)), self.data.shape)
        xs, ys = self.pixel_coords()
        return xs[ix], ys[iy]


def bandpass_filter(ts, lowcut_mhz=0.005, highcut_mhz=7.0, order=3):
    """Zero-phase Butterworth bandpass (second-order sections + filtfilt)."""
    fs = 1.0 / ts.dt_us  # MHz
    nyquist = fs / 2.0
    if not 0 < lowcut_mhz < highcut_mhz:
        raise ConfigurationError(f"bad band edges ({lowcut_mhz}, {highcut_mhz}) MHz")
    if highcut_mhz >= nyquist:
        raise ConfigurationError(
            f"high cut {highcut_mhz} MHz reaches Nyquist {nyquist} MHz"
        )
    if np.iscomplexobj(ts.data):
        raise DomainError("bandpass expects real traces")
    sos = scipy.signal.butter(order, [lowcut_mhz, highcut_mhz],
                              btype="bandpass", fs=fs, output="sos")
    # default filtfilt padding is far shorter than the low-cut pole's
    # transient (tau = fs / (2 pi f_low) samples); pad to ~3 tau
    padlen = min(ts.n_samples - 1, int(np.ceil(3.0 * fs / (2 * np.pi * lowcut_mhz))))
    filtered = scipy.signal.sosfiltfilt(sos, ts.data, axis=1, padlen=padlen)
    return replace(ts, data=filtered)


def analytic_signal(ts):
    """Per-channel analytic signal via the FFT Hilbert transform."""
    if np.iscomplexobj(ts.data):
        raise DomainError("analytic signal of an already-complex series")
    return replace(ts, data=scipy.signal.hilbert(ts.data, axis=1))


def interpolate(ts, time_factor=3, element_factor=2):
    """Fourier-interpolate in time, insert linear virtual elements in between.

    Element interpolation assumes adjacent rows are adjacent elements on the
    arc; virtual elements sit at the angular midpoints (positions from the
    array geometry when present, chord midpoints otherwise).
    """
    if time_factor < 1 or element_factor < 1:
        raise ConfigurationError("interpolation factors must be >= 1")
    if element_factor > 2:
        raise ConfigurationError("element interpolation beyond doubling is not defined")
    data = ts.data
    dt = ts.dt_us
    if time_factor > 1:
        data = scipy.signal.resample(data, data.shape[1] * time_factor, axis=1)
        dt = dt / time_factor
    positions = ts.positions_mm
    geometry = ts.geometry
    if element_factor == 2:
        n = data.shape[0]
        if n < 2:
            raise ConfigurationError("element interpolation needs >= 2 elements")
        dense = np.empty((2 * n - 1, data.shape[1]), dtype=data.dtype)
        dense[0::2] = data
        dense[1::2] = 0.5 * (data[:-1] + data[1:])
        data = dense
        if geometry is not None:
            geometry = geometry.with_midpoints()
            positions = geometry.positions()
        else:
            mids = 0.5 * (positions[:-1] + positions[1:])
            dense_pos = np.empty((2 * n - 1, 2))
            dense_pos[0::2] = positions
            dense_pos[1::2] = mids
            positions = dense_pos
    return TimeSeries(data=data, dt_us=dt, t0_us=ts.t0_us,
                      positions_mm=positions, geometry=geometry)


def das_reconstruct(ts, grid_size=300, fov_mm=32.0, sound_speed=WATER_SOUND_SPEED,
                    center_mm=(0.0, 0.0)):
    """Complex delay-and-sum; returns the envelope (magnitude) image.

    Per pixel and element the trace is sampled at the geometric delay
    |pixel - element| / c with linear interpolation; delays outside the
    recorded window contribute zero.
    """
    if grid_size < 2:
        raise ConfigurationError("grid size must be >= 2")
    if fov_mm <= 0 or sound_speed <= 0:
        raise ConfigurationError("fov and sound speed must be positive")
    pitch = fov_mm / grid_size
    cx, cy = center_mm
    xs = cx + (np.arange(grid_size) - (grid_size - 1) / 2.0) * pitch
    ys = cy + (np.arange(grid_size) - (grid_size - 1) / 2.0) * pitch
    x2, y2 = np.meshgrid(xs, ys)

    data = ts.data if np.iscomplexobj(ts.data) else ts.data.astype(np.complex128)
    n_samples = data.shape[1]
    acc = np.zeros((grid_size, grid_size), dtype=np.complex128)
    for e in range(data.shape[0]):
        ex, ey = ts.positions_mm[e]
        delay = np.hypot(x2 - ex, y2 - ey) / sound_speed
        idx = (delay - ts.t0_us) / ts.dt_us
        i0 = np.floor(idx).astype(np.int64)
        frac = idx - i0
        valid = (i0 >= 0) & (i0 + 1 < n_samples)
        i0c = np.where(valid, i0, 0)
        trace = data[e]
        sample = trace[i0c] * (1.0 - frac) + trace[i0c + 1] * frac
        acc += np.where(valid, sample, 0.0)
    return ReconImage(data=np.abs(acc), pixel_pitch_mm=pitch, center_mm=center_mm)


def crop_center(img, size):
    """Central crop; keeps pitch and world-centre alignment."""
    ny, nx = img.shape
    if size > ny or size > nx:
        raise ConfigurationError(f"crop {size} exceeds image {img.shape}")
    oy = (ny - size) // 2
    ox = (nx - size) // 2
    # an odd offset difference shifts the centre by half a pixel; keep track
    xs, ys = img.pixel_coords()
    new_cx = 0.5 * (xs[ox] + xs[ox + size - 1])
    new_cy = 0.5 * (ys[oy] + ys[oy + size - 1])
    return ReconImage(data=img.data[oy:oy + size, ox:ox + size],
                      pixel_pitch_mm=img.pixel_pitch_mm, center_mm=(new_cx, new_cy))


def reconstruct(ts, config=None):
    """Full chain: bandpass, analytic signal, interpolation, DAS, crop."""
    config = config or ReconConfig()
    ts = bandpass_filter(ts, config.lowcut_mhz, config.highcut_mhz, config.filter_order)
    ts = analytic_signal(ts)
    ts = interpolate(ts, config.time_factor, config.element_factor)
    img = das_reconstruct(ts, config.grid_size, config.fov_mm, config.sound_speed)
    if config.crop_size and config.crop_size < config.grid_size:
        img = crop_center(img, config.crop_size)
    return img
