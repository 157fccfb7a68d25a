"""Slab reflectance/transmittance by adding-doubling, and its inverse.

Forward model for a homogeneous scattering slab between parallel interfaces
(double-integrating-sphere style total reflectance and transmittance under
collimated normal illumination). Discrete ordinates in the polar cosine with
a quadrature that places a node exactly at mu = 1 for the collimated beam
and, for a refractive-index-mismatched slab, splits at the critical cosine
so totally internally reflected directions get their own nodes. A thin
starting layer (single scattering) is doubled to the target optical
thickness; Fresnel boundaries are added asymmetrically.

All operators live in flux space: matrices map the vector of per-channel
fluxes, so totals are plain column sums and a conservative layer has unit
column sums. Lengths are mm.
"""

import functools
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .errors import ConfigurationError, DomainError, NoConvergenceError

DEFAULT_NODES = 8
THIN_LAYER_TAU = 1e-4
PHASE_TRUNCATION_MARGIN = 2  # Legendre terms kept = margin * nodes


@dataclass(frozen=True)
class SlabSample:
    """Homogeneous slab: geometry plus optical properties (per mm)."""

    thickness_mm: float
    mu_a_per_mm: float
    mu_s_per_mm: float
    g: float = 0.7
    n: float = 1.4

    def __post_init__(self):
        if self.thickness_mm <= 0:
            raise ConfigurationError(f"thickness must be > 0, got {self.thickness_mm}")
        if self.mu_a_per_mm < 0 or self.mu_s_per_mm < 0:
            raise ConfigurationError("mu_a and mu_s must be >= 0")
        if not -1 < self.g < 1:
            raise ConfigurationError(f"anisotropy must be in (-1, 1), got {self.g}")
        if self.n < 1:
            raise ConfigurationError(f"relative index must be >= 1, got {self.n}")

    @property
    def mu_s_prime_per_mm(self):
        return self.mu_s_per_mm * (1.0 - self.g)

    @property
    def optical_thickness(self):
        return (self.mu_a_per_mm + self.mu_s_per_mm) * self.thickness_mm

    @property
    def albedo(self):
        mu_t = self.mu_a_per_mm + self.mu_s_per_mm
        return self.mu_s_per_mm / mu_t if mu_t > 0 else 0.0


@dataclass(frozen=True)
class DISMeasurement:
    """Total (diffuse + unscattered) reflectance and transmittance."""

    reflectance: float
    transmittance: float

    def __post_init__(self):
        r, t = self.reflectance, self.transmittance
        if not (np.isfinite(r) and np.isfinite(t)) or r < 0 or t < 0:
            raise DomainError(f"R, T must be finite and >= 0, got ({r}, {t})")
        if r + t > 1.0 + 1e-9:
            raise DomainError(f"R + T = {r + t} exceeds unity")


def radau_right_rule(n):
    """Gauss-Radau rule on [-1, 1] with a fixed node at +1.

    Free nodes are the (negated) roots of (P_{n-1} + P_n)/(1 + x); weights
    come from solving the moment equations, exact to degree 2n - 2.
    """
    if n < 1:
        raise ConfigurationError("quadrature needs >= 1 node")
    if n == 1:
        return np.array([1.0]), np.array([2.0])
    leg = np.polynomial.legendre
    series = leg.Legendre.basis(n - 1) + leg.Legendre.basis(n)
    coeffs = leg.leg2poly(series.coef)
    quotient, rem = np.polynomial.polynomial.polydiv(coeffs, [1.0, 1.0])
    assert abs(rem[0]) < 1e-10
    free = np.real(np.polynomial.polynomial.polyroots(quotient))
    nodes = np.sort(np.concatenate([-free, [1.0]]))
    powers = np.arange(n)
    moments = np.where(powers % 2 == 0, 2.0 / (powers + 1), 0.0)
    weights = np.linalg.solve(np.vander(nodes, n, increasing=True).T, moments)
    return nodes, weights


def _map_interval(nodes, weights, lo, hi):
    half = 0.5 * (hi - lo)
    return lo + half * (nodes + 1.0), weights * half


def build_quadrature(n_rel, n_nodes=DEFAULT_NODES):
    """Polar-cosine nodes/weights on (0, 1] with the last node exactly 1.

    Matched slabs get a single Radau rule. Mismatched slabs split at the
    critical cosine mu_c = sqrt(1 - 1/n^2): Gauss nodes below (totally
    internally reflected channels), Radau nodes above.
    """
    if n_nodes < 2:
        raise ConfigurationError("need >= 2 quadrature nodes")
    if n_rel == 1.0:
        nodes, weights = radau_right_rule(n_nodes)
        return _map_interval(nodes, weights, 0.0, 1.0)
    if n_nodes % 2:
        raise ConfigurationError("mismatched-index quadrature needs even node count")
    half = n_nodes // 2
    mu_c = np.sqrt(1.0 - 1.0 / n_rel ** 2)
    gx, gw = np.polynomial.legendre.leggauss(half)
    lo_nodes, lo_weights = _map_interval(gx, gw, 0.0, mu_c)
    rx, rw = radau_right_rule(half)
    hi_nodes, hi_weights = _map_interval(rx, rw, mu_c, 1.0)
    return (np.concatenate([lo_nodes, hi_nodes]),
            np.concatenate([lo_weights, hi_weights]))


def hg_redistribution(g, mu, weights, n_terms=None):
    """Azimuth-averaged scattering redistribution between cosine channels.

    Returns (h_plus, h_minus) for same/opposite hemisphere coupling,
    from the Legendre expansion with coefficients g^k, truncated, clamped
    non-negative, then symmetrically rescaled (iterative proportional
    fitting) so every channel redistributes exactly unit probability:
    (1/2) sum_j w_j (h_plus + h_minus)[i, j] = 1.
    """
    n = mu.size
    if n_terms is None:
        n_terms = PHASE_TRUNCATION_MARGIN * n
    pk_pos = np.stack([np.polynomial.legendre.Legendre.basis(k)(mu)
                       for k in range(n_terms)])
    signs = np.array([(-1.0) ** k for k in range(n_terms)])
    coeff = (2 * np.arange(n_terms) + 1) * g ** np.arange(n_terms)
    h_plus = np.einsum("k,ki,kj->ij", coeff, pk_pos, pk_pos)
    h_minus = np.einsum("k,ki,kj->ij", coeff * signs, pk_pos, pk_pos)
    h_plus = np.maximum(h_plus, 0.0)
    h_minus = np.maximum(h_minus, 0.0)
    d = np.ones(n)
    for _ in range(200):
        norm = 0.5 * ((h_plus + h_minus) * (weights * d)[None, :]).sum(axis=1) * d
        if np.max(np.abs(norm - 1.0)) < 1e-13:
            break
        d = d / np.sqrt(norm)
    h_plus = d[:, None] * h_plus * d[None, :]
    h_minus = d[:, None] * h_minus * d[None, :]
    return h_plus, h_minus


def fresnel_reflectance(n_rel, mu):
    """Unpolarized Fresnel reflectance for light inside the slab hitting the
    boundary at cosine mu; total internal reflection below the critical cosine."""
    mu = np.asarray(mu, dtype=float)
    sin_i2 = 1.0 - mu ** 2
    sin_t2 = n_rel ** 2 * sin_i2
    tir = sin_t2 >= 1.0
    mu_t = np.sqrt(np.maximum(1.0 - sin_t2, 0.0))
    rs = ((n_rel * mu - mu_t) / (n_rel * mu + mu_t)) ** 2
    rp = ((mu - n_rel * mu_t) / (mu + n_rel * mu_t)) ** 2
    return np.where(tir, 1.0, 0.5 * (rs + rp))


@dataclass
class LayerOps:
    """Down/up reflection and transmission operators of one layer stack."""

    r_down: np.ndarray
    r_up: np.ndarray
    t_down: np.ndarray
    t_up: np.ndarray


def add_layers(top, bottom):
    """Stack two layers; interreflections summed by the matrix geometric series."""
    n = top.r_down.shape[0]
    eye = np.eye(n)
    down_gain = np.linalg.solve(eye - top.r_up @ bottom.r_down, top.t_down)
    up_gain = np.linalg.solve(eye - bottom.r_down @ top.r_up, bottom.t_up)
    return LayerOps(
        r_down=top.r_down + top.t_up @ bottom.r_down @ down_gain,
        r_up=bottom.r_up + bottom.t_down @ top.r_up @ up_gain,
        t_down=bottom.t_down @ down_gain,
        t_up=top.t_up @ up_gain)


@functools.lru_cache(maxsize=128)
def _cached_quadrature(n_rel, n_nodes):
    return build_quadrature(n_rel, n_nodes)


@functools.lru_cache(maxsize=128)
def _cached_redistribution(g, n_rel, n_nodes):
    mu, w = _cached_quadrature(n_rel, n_nodes)
    return hg_redistribution(g, mu, w)


def _slab_operators(sample, n_nodes=DEFAULT_NODES):
    """Homogeneous-slab flux operators by doubling a single-scatter layer."""
    mu, w = _cached_quadrature(sample.n, n_nodes)
    tau = sample.optical_thickness
    if tau == 0:
        eye = np.eye(mu.size)
        return LayerOps(np.zeros_like(eye), np.zeros_like(eye), eye, eye), mu, w
    a = sample.albedo
    h_plus, h_minus = _cached_redistribution(sample.g, sample.n, n_nodes)
    # thin layer must stay optically thin relative to the steepest channel
    target = min(THIN_LAYER_TAU, 0.1 * mu.min())
    n_doublings = max(1, int(np.ceil(np.log2(tau / target))))
    tau0 = tau / 2 ** n_doublings
    # flux-space single-scatter layer: receiving channel i gains w_i of the
    # probability scattered out of feeding channel j (path length tau0/mu_j),
    # so a conservative layer has exactly unit column sums
    scatter = 0.5 * a * tau0 * w[:, None] / mu[None, :]
    r = scatter * h_minus
    t = scatter * h_plus + np.diag(1.0 - tau0 / mu)
    eye = np.eye(mu.size)
    for _ in range(n_doublings):
        gain = np.linalg.solve(eye - r @ r, t)
        r = r + t @ r @ gain
        t = t @ gain
    return LayerOps(r_down=r, r_up=r, t_down=t, t_up=t), mu, w


def _boundary_ops(n_rel, mu):
    r = fresnel_reflectance(n_rel, mu)
    return LayerOps(r_down=np.diag(r), r_up=np.diag(r),
                    t_down=np.diag(1.0 - r), t_up=np.diag(1.0 - r))


def ad_forward(sample, n_nodes=DEFAULT_NODES):
    """Total reflectance and transmittance for collimated normal incidence."""
    if sample.optical_thickness == 0 and sample.n != 1.0:
        # lossless slab between mismatched interfaces: the interreflection
        # series is singular in the totally-internally-reflected channels
        # (trapped but never fed), so use the scalar two-interface series
        r0 = float(fresnel_reflectance(sample.n, np.array([1.0]))[0])
        return DISMeasurement(reflectance=2 * r0 / (1 + r0),
                              transmittance=(1 - r0) / (1 + r0))
    slab, mu, _ = _slab_operators(sample, n_nodes)
    if sample.n != 1.0:
        boundary = _boundary_ops(sample.n, mu)
        slab = add_layers(add_layers(boundary, slab), boundary)
    collimated = mu.size - 1  # quadrature guarantees mu[-1] == 1
    refl = float(slab.r_down[:, collimated].sum())
    trans = float(slab.t_down[:, collimated].sum())
    return DISMeasurement(reflectance=min(refl, 1.0), transmittance=min(trans, 1.0))


@dataclass(frozen=True)
class InverseResult:
    mu_a_per_mm: float
    mu_s_prime_per_mm: float
    residual: float
    n_evaluations: int


def ad_inverse(measurement, thickness_mm, g=0.7, n=1.4, n_nodes=DEFAULT_NODES,
               mu_a_bounds=(1e-3, 1.0), mu_s_prime_bounds=(0.1, 3.0),
               grid_size=16, rel_tol=1e-4, residual_tol=1e-3, max_passes=40):
    """Recover (mu_a, mu_s') from a total R/T measurement.

    Coarse log-spaced grid search seeds alternating 1-D bounded
    minimisations of the squared (R, T) misfit in log-parameter space.
    Raises NoConvergenceError (carrying the best point) if the fit cannot
    reach the measurement within `residual_tol`.
    """
    evals = [0]

    def forward(log_mu_a, log_mu_sp):
        evals[0] += 1
        mu_a = np.exp(log_mu_a)
        mu_s = np.exp(log_mu_sp) / (1.0 - g)
        m = ad_forward(SlabSample(thickness_mm=thickness_mm, mu_a_per_mm=mu_a,
                                  mu_s_per_mm=mu_s, g=g, n=n), n_nodes)
        return ((m.reflectance - measurement.reflectance) ** 2
                + (m.transmittance - measurement.transmittance) ** 2)

    la_lo, la_hi = np.log(mu_a_bounds[0]), np.log(mu_a_bounds[1])
    ls_lo, ls_hi = np.log(mu_s_prime_bounds[0]), np.log(mu_s_prime_bounds[1])
    grid_a = np.linspace(la_lo, la_hi, grid_size)
    grid_s = np.linspace(ls_lo, ls_hi, grid_size)
    costs = np.array([[forward(a, s) for s in grid_s] for a in grid_a])
    ia, is_ = np.unravel_index(np.argmin(costs), costs.shape)
    la, ls = grid_a[ia], grid_s[is_]

    cost = costs[ia, is_]
    for _ in range(max_passes):
        res_a = scipy.optimize.minimize_scalar(
            lambda x: forward(x, ls), bounds=(la_lo, la_hi), method="bounded",
            options={"xatol": rel_tol / 10})
        la_new = res_a.x
        res_s = scipy.optimize.minimize_scalar(
            lambda x: forward(la_new, x), bounds=(ls_lo, ls_hi), method="bounded",
            options={"xatol": rel_tol / 10})
        ls_new, cost = res_s.x, res_s.fun
        if abs(la_new - la) < rel_tol and abs(ls_new - ls) < rel_tol:
            la, ls = la_new, ls_new
            break
        la, ls = la_new, ls_new

    residual = float(np.sqrt(cost))
    result = InverseResult(mu_a_per_mm=float(np.exp(la)),
                           mu_s_prime_per_mm=float(np.exp(ls)),
                           residual=residual, n_evaluations=evals[0])
    if residual > residual_tol:
        raise NoConvergenceError(
            f"inverse stalled at residual {residual:.3e} "
            f"(tolerance {residual_tol:.1e}); measurement may be unreachable",
            best=result, residual=residual)
    return result


@dataclass(frozen=True)
class ThicknessSensitivity:
    d_mu_a_per_mm: float
    d_mu_s_prime_per_mm: float
    rel_mu_a: float
    rel_mu_s_prime: float


def propagate_thickness_error(measurement, thickness_mm, thickness_error_mm,
                              **inverse_kwargs):
    """Propagate a slab-thickness uncertainty into the recovered properties.

    Central difference of the inverse solution with respect to the assumed
    thickness, scaled by the stated error; relative values are against the
    nominal-thickness solution.
    """
    if thickness_error_mm < 0:
        raise ConfigurationError("thickness error must be >= 0")
    nominal = ad_inverse(measurement, thickness_mm, **inverse_kwargs)
    if thickness_error_mm == 0:
        return ThicknessSensitivity(0.0, 0.0, 0.0, 0.0)
    lo = ad_inverse(measurement, thickness_mm - thickness_error_mm, **inverse_kwargs)
    hi = ad_inverse(measurement, thickness_mm + thickness_error_mm, **inverse_kwargs)
    d_mu_a = 0.5 * (hi.mu_a_per_mm - lo.mu_a_per_mm)
    d_mu_sp = 0.5 * (hi.mu_s_prime_per_mm - lo.mu_s_prime_per_mm)
    return ThicknessSensitivity(
        d_mu_a_per_mm=d_mu_a, d_mu_s_prime_per_mm=d_mu_sp,
        rel_mu_a=abs(d_mu_a) / nominal.mu_a_per_mm,
        rel_mu_s_prime=abs(d_mu_sp) / nominal.mu_s_prime_per_mm)
