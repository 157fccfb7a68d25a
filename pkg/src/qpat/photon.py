"""Monte Carlo fluence: illumination geometry, transport, initial pressure.

Fluence is reported per unit delivered energy, in 1/mm^2: each launched
photon carries weight 1 and the per-voxel track-length tally is divided by
(voxel volume * photon count). Initial pressure is p0 = Gamma * mu_a * phi.

Determinism contract: results depend only on (seed, n_photons, n_slots) and
the inputs, never on thread count. See _transport for the stream construction.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _transport
from .errors import ConfigurationError, DomainError

ROULETTE_THRESHOLD = 1e-4
ROULETTE_SURVIVE = 0.1
DEFAULT_SLOTS = 8


class RngStream:
    """Counter-based uniform stream keyed on (seed, stream index).

    Mirrors the compiled generator bit for bit (python ints mod 2**64), so
    scalar draws made here agree with what the transport kernel sees for the
    same (seed, index).
    """

    MASK = (1 << 64) - 1
    GAMMA = 0x9E3779B97F4A7C15

    def __init__(self, seed, index=0):
        self.state = self._mix((int(seed) + (int(index) * self.GAMMA & self.MASK)) & self.MASK)

    @classmethod
    def _mix(cls, z):
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & cls.MASK
        z = ((z ^ (z >> 27)) * 0x94D4A81E27B2C2D3) & cls.MASK
        return z ^ (z >> 31)

    def uniform(self):
        self.state = (self.state + self.GAMMA) & self.MASK
        return (self._mix(self.state) >> 11) * 2.0**-53


def scatter_hg(g, rng):
    """One Henyey-Greenstein deflection: returns (cos_theta, azimuth).

    Azimuth is uniform on [0, 2*pi); cos_theta follows the HG inverse CDF,
    isotropic when g == 0.
    """
    if not -1.0 < g < 1.0:
        raise DomainError(f"anisotropy g={g} outside (-1, 1)")
    ct = _transport.hg_cos_theta(g, rng.uniform())
    phi = 2.0 * math.pi * rng.uniform()
    return float(ct), float(phi)


def sample_hg_batch(g, n, seed):
    """Vectorised HG draws (one stream per index); for studies and checks."""
    if not -1.0 < g < 1.0:
        raise DomainError(f"anisotropy g={g} outside (-1, 1)")
    return _transport.sample_hg_batch(float(g), int(n), int(seed))


@dataclass(frozen=True)
class IlluminationGeometry:
    """Photon launch description: bundle origins/axes plus beam shape.

    ``origins``/``directions`` are (n, 3) float64 arrays in mm (directions
    unit length). Photons pick a bundle uniformly, offset uniformly over a
    disc of ``spot_radius_mm`` perpendicular to the axis, and deflect
    uniformly within ``divergence_half_angle_deg`` of it.
    """

    origins: np.ndarray
    directions: np.ndarray
    spot_radius_mm: float = 0.0
    divergence_half_angle_deg: float = 0.0

    def __post_init__(self):
        origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        if origins.shape != directions.shape or origins.shape[1] != 3:
            raise ConfigurationError("origins/directions must both be (n, 3)")
        norms = np.linalg.norm(directions, axis=1)
        if np.any(norms <= 0):
            raise ConfigurationError("zero-length bundle direction")
        directions = directions / norms[:, None]
        if self.spot_radius_mm < 0:
            raise ConfigurationError("spot radius must be >= 0")
        if not 0 <= self.divergence_half_angle_deg < 90:
            raise ConfigurationError("divergence half-angle must be in [0, 90) deg")
        object.__setattr__(self, "origins", origins)
        object.__setattr__(self, "directions", directions)

    @classmethod
    def pencil(cls, origin, direction):
        return cls(np.asarray([origin]), np.asarray([direction]))

    @classmethod
    def ring(cls, n_bundle_pairs=5, ring_radius_mm=22.0, axial_offset_mm=3.0,
             target_mm=(0.0, 0.0, 0.0), spot_radius_mm=2.0,
             divergence_half_angle_deg=10.0):
        """Fibre-bundle ring: pairs straddle the imaging plane, aimed at the target."""
        if n_bundle_pairs < 1:
            raise ConfigurationError("need at least one bundle pair")
        target = np.asarray(target_mm, dtype=np.float64)
        origins = []
        for k in range(n_bundle_pairs):
            ang = 2.0 * math.pi * k / n_bundle_pairs
            for sz in (+1.0, -1.0):
                origins.append([
                    target[0] + ring_radius_mm * math.cos(ang),
                    target[1] + ring_radius_mm * math.sin(ang),
                    target[2] + sz * axial_offset_mm,
                ])
        origins = np.asarray(origins)
        directions = target[None, :] - origins
        return cls(origins, directions, spot_radius_mm, divergence_half_angle_deg)


@dataclass(frozen=True)
class TransportStats:
    launched: float
    absorbed: float
    escaped: float
    roulette_net: float

    @property
    def conservation_gap(self):
        """|launched - absorbed - escaped - roulette_net| / launched."""
        return abs(self.launched - self.absorbed - self.escaped - self.roulette_net) / self.launched


@dataclass(frozen=True)
class FluenceResult:
    phi: np.ndarray  # [z, y, x], 1/mm^2 per unit delivered energy
    stats: TransportStats
    n_photons: int
    seed: int
    n_slots: int


def simulate_fluence(props, grid, illumination, n_photons, seed,
                     n_slots=DEFAULT_SLOTS,
                     roulette_threshold=ROULETTE_THRESHOLD,
                     roulette_survive=ROULETTE_SURVIVE):
    """Trace ``n_photons`` through the property volumes and return fluence.

    ``props`` supplies mu_a/mu_s/g in 1/mm on ``grid`` (arrays [z, y, x]).
    Raises DomainError for non-finite or negative coefficients and
    ConfigurationError for bad run parameters.
    """
    mu_a = np.ascontiguousarray(props.mu_a, dtype=np.float32)
    mu_s = np.ascontiguousarray(props.mu_s, dtype=np.float32)
    g = np.ascontiguousarray(props.g, dtype=np.float32)
    if mu_a.shape != grid.shape_zyx or mu_s.shape != mu_a.shape or g.shape != mu_a.shape:
        raise DomainError(
            f"property volumes {mu_a.shape} do not match grid {grid.shape_zyx}"
        )
    for name, vol in (("mu_a", mu_a), ("mu_s", mu_s)):
        if not np.all(np.isfinite(vol)) or np.any(vol < 0):
            raise DomainError(f"non-finite or negative {name}")
    if not np.all(np.isfinite(g)) or np.any(np.abs(g) >= 1.0):
        raise DomainError("anisotropy volume must be finite with |g| < 1")
    if n_photons <= 0:
        raise ConfigurationError(f"n_photons must be positive, got {n_photons}")
    if n_slots <= 0:
        raise ConfigurationError(f"n_slots must be positive, got {n_slots}")
    if not 0.0 < roulette_survive < 1.0:
        raise ConfigurationError("roulette survival probability must be in (0, 1)")
    if roulette_threshold <= 0.0:
        raise ConfigurationError("roulette threshold must be positive")

    dx, dy, dz = grid.spacing_mm
    # kernel works in grid-corner coordinates
    origins = illumination.origins - np.asarray(grid.origin_mm)[None, :]
    cos_div = math.cos(math.radians(illumination.divergence_half_angle_deg))
    tally, slot_stats = _transport.run_transport(
        mu_a, mu_s, g, float(dx), float(dy), float(dz),
        np.ascontiguousarray(origins), np.ascontiguousarray(illumination.directions),
        float(illumination.spot_radius_mm), cos_div,
        int(n_photons), int(seed), int(n_slots),
        float(roulette_threshold), float(roulette_survive),
    )
    # fixed-order merge keeps results independent of scheduling
    merged = tally.sum(axis=0)
    sums = slot_stats.sum(axis=0)
    phi = merged / (grid.voxel_volume_mm3() * n_photons)
    stats = TransportStats(
        launched=float(n_photons),
        absorbed=float(sums[0]),
        escaped=float(sums[1]),
        roulette_net=float(sums[2]),
    )
    return FluenceResult(phi=phi, stats=stats, n_photons=int(n_photons),
                         seed=int(seed), n_slots=int(n_slots))


def compute_p0(phi, props):
    """Initial pressure p0 = Gamma * mu_a * phi (arbitrary units)."""
    phi = np.asarray(phi)
    if phi.shape != props.mu_a.shape:
        raise DomainError(f"fluence {phi.shape} does not match mu_a {props.mu_a.shape}")
    return props.grueneisen.astype(np.float64) * props.mu_a.astype(np.float64) * phi
