"""Image-domain absorption estimators and spectral unmixing.

Two non-learned routes from a reconstructed envelope image to an absolute
absorption map: a linear calibration fitted on background statistics of
training images (signal vs known mu_a), and fluence-corrected inversion
using a known fluence map. Region aggregation and linear sO2 unmixing
complete the quantification chain. Absorption is handled in 1/cm here,
matching how calibration curves are usually reported; helpers convert.
"""

from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .errors import AggregationError, DomainError, FitError

BACKGROUND_TOP_FRACTION = 0.02  # brightest pixels summarise a background image
INCLUSION_RIM_MM = 1.28  # depth band inside the inclusion boundary for medians
FLUENCE_FLOOR_FRACTION = 1e-6  # fluence below this (relative) marks pixels invalid


@dataclass(frozen=True)
class LinearMap:
    """signal = slope * mu_a + intercept (mu_a in 1/cm)."""

    slope: float
    intercept: float
    n_points: int = 0
    r_squared: float = float("nan")

    def invert(self, signal):
        """Absorption estimate in 1/cm, clamped at zero."""
        if self.slope == 0:
            raise DomainError("degenerate calibration: zero slope")
        return np.maximum((np.asarray(signal, dtype=float) - self.intercept)
                          / self.slope, 0.0)


def brightest_mask(image_data, mask=None, top_fraction=BACKGROUND_TOP_FRACTION):
    """Boolean mask of the brightest `top_fraction` of finite pixels (within
    `mask` when given). Invalid (NaN) pixels never qualify."""
    data = np.asarray(image_data, dtype=float)
    pool = np.isfinite(data)
    if mask is not None:
        pool &= np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(pool.ravel())
    if idx.size == 0:
        raise DomainError("no valid pixels to select from")
    k = max(1, int(round(top_fraction * idx.size)))
    order = np.argpartition(data.ravel()[idx], idx.size - k)[idx.size - k:]
    out = np.zeros(data.size, dtype=bool)
    out[idx[order]] = True
    return out.reshape(data.shape)


def brightest_pixels(image_data, mask=None, top_fraction=BACKGROUND_TOP_FRACTION):
    """Values of the brightest `top_fraction` of finite pixels (over the mask
    when given). Invalid (NaN) pixels never qualify."""
    data = np.asarray(image_data, dtype=float)
    if mask is not None:
        data = data[np.asarray(mask, dtype=bool)]
    data = data.ravel()
    data = data[np.isfinite(data)]
    if data.size == 0:
        raise DomainError("no valid pixels to select from")
    k = max(1, int(round(top_fraction * data.size)))
    return np.partition(data, data.size - k)[data.size - k:]


def background_signal(image_data, background_mask=None,
                      top_fraction=BACKGROUND_TOP_FRACTION):
    """Scalar signal summary of a (homogeneous-background) image: mean of the
    brightest `top_fraction` of pixels, over the mask when given."""
    return float(brightest_pixels(image_data, background_mask, top_fraction).mean())


def fit_linear_calibration(signals, mu_a_per_cm):
    """Least-squares line through (mu_a, signal) pairs from training images."""
    y = np.asarray(signals, dtype=float)
    x = np.asarray(mu_a_per_cm, dtype=float)
    if y.shape != x.shape or y.ndim != 1:
        raise FitError(f"signal/mu_a shape mismatch: {y.shape} vs {x.shape}")
    if y.size < 2:
        raise FitError("calibration needs at least two points")
    if np.ptp(x) == 0:
        raise FitError("calibration needs at least two distinct mu_a values")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise FitError("non-finite calibration data")
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), res, _, _ = np.linalg.lstsq(A, y, rcond=None)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(res[0]) if res.size else float(((A @ [slope, intercept] - y) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LinearMap(slope=float(slope), intercept=float(intercept),
                     n_points=int(y.size), r_squared=r2)


def apply_calibration(image_data, calibration):
    """Pixelwise inverse of the calibration line; output mu_a in 1/cm, >= 0."""
    return calibration.invert(image_data)


def _divide_by_fluence(image_data, fluence):
    """signal / fluence with pixels below the relative fluence floor marked
    invalid (NaN), so downstream statistics can exclude them."""
    data = np.asarray(image_data, dtype=float)
    phi = np.asarray(fluence, dtype=float)
    if data.shape != phi.shape:
        raise DomainError(f"image/fluence shape mismatch: {data.shape} vs {phi.shape}")
    if not np.all(np.isfinite(phi)) or np.any(phi < 0):
        raise DomainError("fluence must be finite and non-negative")
    peak = phi.max()
    if peak <= 0:
        raise DomainError("fluence map is identically zero")
    valid = phi >= FLUENCE_FLOOR_FRACTION * peak
    corrected = np.full(data.shape, np.nan)
    corrected[valid] = data[valid] / phi[valid]
    return corrected


def fluence_correct(image_data, fluence, scale=1.0, offset=0.0):
    """Divide out a known fluence map, then map corrected signal to mu_a.

    mu_a = (signal / fluence - offset) / scale, clamped at zero. Pixels whose
    fluence falls below FLUENCE_FLOOR_FRACTION of the fluence maximum are
    marked invalid (NaN). `scale` and `offset` absorb the system constant of
    the corrected signal (1/cm).
    """
    if scale == 0:
        raise DomainError("degenerate fluence calibration: zero scale")
    corrected = _divide_by_fluence(image_data, fluence)
    return np.maximum((corrected - offset) / scale, 0.0)


def fit_image_calibration(images, masks, mu_a_per_cm,
                          top_fraction=BACKGROUND_TOP_FRACTION):
    """Calibration line from training images: pool the brightest-fraction
    pixels of each image's background mask as individual regression points
    against that image's known absorption."""
    signals, references = [], []
    for img, mask, mu in zip(images, masks, mu_a_per_cm):
        px = brightest_pixels(img, mask, top_fraction)
        signals.append(px)
        references.append(np.full(px.size, mu))
    return fit_linear_calibration(np.concatenate(signals),
                                  np.concatenate(references))


def fit_fluence_calibration(images, fluences, masks, mu_a_per_cm,
                            top_fraction=BACKGROUND_TOP_FRACTION):
    """Fit scale/offset of the fluence-corrected signal on training data.

    Pixel selection follows the same brightest-fraction rule as the plain
    image calibration and is anchored to the raw image brightness (the
    illuminated rim of the background); the regression then runs on the
    fluence-corrected values at those pixels. Ranking by corrected value
    instead would order pixels by 1/fluence and pool the darkest, least
    reliable ones."""
    signals, references = [], []
    for img, phi, mask, mu in zip(images, fluences, masks, mu_a_per_cm):
        corrected = _divide_by_fluence(img, phi)
        values = corrected[brightest_mask(img, mask, top_fraction)]
        values = values[np.isfinite(values)]
        if values.size == 0:
            raise FitError("no valid fluence-corrected pixels in selection")
        signals.append(values)
        references.append(np.full(values.size, mu))
    return fit_linear_calibration(np.concatenate(signals),
                                  np.concatenate(references))


def inclusion_rim_mask(mask, pixel_pitch_mm, depth_mm=INCLUSION_RIM_MM):
    """Band of inclusion pixels within `depth_mm` of the boundary (inward
    Euclidean distance). Deep light shadowing makes the core unreliable, so
    medians are taken over this first depth band."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise AggregationError("empty inclusion mask")
    dist = scipy.ndimage.distance_transform_edt(
        mask, sampling=(pixel_pitch_mm, pixel_pitch_mm))
    band = mask & (dist <= depth_mm)
    if not band.any():
        raise AggregationError(
            f"no inclusion pixels within {depth_mm} mm of the boundary")
    return band


def aggregate_region(estimate_map, mask, kind, pixel_pitch_mm=None,
                     depth_mm=INCLUSION_RIM_MM):
    """Region summary of a pixelwise estimate: mean over `background` masks,
    median over the first `depth_mm` inside the boundary for `inclusion`
    masks. Invalid (NaN) pixels are excluded; a region with none left is an
    error."""
    data = np.asarray(estimate_map, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if data.shape != mask.shape:
        raise AggregationError(f"map/mask shape mismatch: {data.shape} vs {mask.shape}")
    if not mask.any():
        raise AggregationError("empty region mask")
    if kind == "background":
        values = data[mask]
    elif kind == "inclusion":
        if pixel_pitch_mm is None:
            raise AggregationError("inclusion aggregation needs the pixel pitch")
        values = data[inclusion_rim_mask(mask, pixel_pitch_mm, depth_mm)]
    else:
        raise AggregationError(f"unknown region kind {kind!r}")
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise AggregationError("no valid pixels left in region")
    return float(values.mean()) if kind == "background" else float(np.median(values))


@dataclass(frozen=True)
class ChromophoreBasis:
    """Molar absorption columns for two chromophores on a wavelength grid."""

    wavelengths_nm: np.ndarray
    eps_oxy: np.ndarray
    eps_deoxy: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=float)
        eo = np.asarray(self.eps_oxy, dtype=float)
        ed = np.asarray(self.eps_deoxy, dtype=float)
        if not (wl.shape == eo.shape == ed.shape) or wl.ndim != 1 or wl.size < 2:
            raise DomainError("basis needs matching 1-D arrays of >= 2 wavelengths")
        object.__setattr__(self, "wavelengths_nm", wl)
        object.__setattr__(self, "eps_oxy", eo)
        object.__setattr__(self, "eps_deoxy", ed)

    def matrix(self):
        return np.stack([self.eps_oxy, self.eps_deoxy], axis=1)

    @classmethod
    def hemoglobin(cls, wavelengths_nm):
        """Basis at the given wavelengths from the packaged extinction table."""
        from importlib import resources

        wl = np.atleast_1d(np.asarray(wavelengths_nm, dtype=float))
        path = resources.files("qpat").joinpath("data/hemoglobin_extinction.csv")
        table = np.genfromtxt(str(path), delimiter=",", names=True)
        grid = table["wavelength_nm"]
        if wl.min() < grid.min() or wl.max() > grid.max():
            raise DomainError(
                f"wavelengths {wl} outside extinction table "
                f"[{grid.min()}, {grid.max()}] nm")
        return cls(wavelengths_nm=wl,
                   eps_oxy=np.interp(wl, grid, table["eps_hbo2_cm_per_M"]),
                   eps_deoxy=np.interp(wl, grid, table["eps_hb_cm_per_M"]))


def linear_unmix_so2(mu_a_stack, basis):
    """Per-pixel oxygen saturation from multi-wavelength absorption maps.

    mu_a_stack has shape (n_wavelengths, ...); each pixel's spectrum is
    least-squares decomposed onto the two chromophore columns, negative
    concentrations are clamped to zero, and sO2 = c_oxy / (c_oxy + c_deoxy).
    Pixels with no chromophore signal come back NaN. The result only depends
    on spectral shape, not on absolute scaling of the maps or the basis.
    """
    stack = np.asarray(mu_a_stack, dtype=float)
    E = basis.matrix()
    if stack.shape[0] != E.shape[0]:
        raise DomainError(
            f"{stack.shape[0]} wavelength maps vs {E.shape[0]} basis rows")
    if np.linalg.matrix_rank(E) < 2:
        raise DomainError("chromophore spectra are linearly dependent")
    flat = stack.reshape(stack.shape[0], -1)
    coeffs, *_ = np.linalg.lstsq(E, flat, rcond=None)
    coeffs = np.maximum(coeffs, 0.0)
    total = coeffs.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        so2 = np.where(total > 0, coeffs[0] / total, np.nan)
    return so2.reshape(stack.shape[1:])
