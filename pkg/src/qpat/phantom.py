"""Tissue-mimicking phantom geometry, materials, and random sampling.

Coordinates are millimetres. A phantom is a couplant-filled voxel grid with a
background cylinder (axis along z, the elevation axis) and zero or more rod
inclusions running parallel to it. Optical coefficients are stored in 1/mm;
where a config mirrors bench conventions it says so in the field name (1/cm).

Label convention after rasterisation: 0 = couplant, 1 = background,
2..k+1 = inclusions in declaration order, later shapes winning overlaps.
"""

import copy
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError

COUPLANT_LABEL = 0
BACKGROUND_LABEL = 1
FIRST_INCLUSION_LABEL = 2

# Device-like defaults: water couplant at room temperature.
WATER_SOUND_SPEED_MM_PER_US = 1.497
WATER_DENSITY_KG_PER_M3 = 1000.0


@dataclass(frozen=True)
class VoxelGrid:
    """Regular grid; ``origin_mm`` is the corner of voxel (0, 0, 0)."""

    dims: tuple  # (nx, ny, nz)
    spacing_mm: tuple  # (dx, dy, dz)
    origin_mm: tuple = None  # defaults to centring the grid on (0, 0, 0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(dims) != 3 or len(spacing) != 3:
            raise ConfigurationError("VoxelGrid needs 3 dims and 3 spacings")
        if any(d <= 0 for d in dims) or any(s <= 0 for s in spacing):
            raise ConfigurationError(f"non-positive grid: dims={dims} spacing={spacing}")
        if self.origin_mm is None:
            origin = tuple(-0.5 * d * s for d, s in zip(dims, spacing))
        else:
            origin = tuple(float(o) for o in self.origin_mm)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def shape_zyx(self):
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    def axis_centers(self, axis):
        n = self.dims[axis]
        return self.origin_mm[axis] + (np.arange(n) + 0.5) * self.spacing_mm[axis]

    def extent_mm(self):
        return tuple(d * s for d, s in zip(self.dims, self.spacing_mm))

    def voxel_volume_mm3(self):
        dx, dy, dz = self.spacing_mm
        return dx * dy * dz


@dataclass(frozen=True)
class Cylinder:
    """Axis-aligned circular cylinder; ``axis`` is 'x', 'y', or 'z'."""

    center_mm: tuple
    radius_mm: float
    half_length_mm: float
    axis: str = "z"

    def __post_init__(self):
        if self.axis not in ("x", "y", "z"):
            raise ConfigurationError(f"cylinder axis must be x/y/z, got {self.axis!r}")
        if self.radius_mm <= 0 or self.half_length_mm <= 0:
            raise ConfigurationError("cylinder radius and half-length must be positive")

    def contains(self, x, y, z):
        cx, cy, cz = self.center_mm
        if self.axis == "z":
            radial = (x - cx) ** 2 + (y - cy) ** 2
            along = np.abs(z - cz)
        elif self.axis == "y":
            radial = (x - cx) ** 2 + (z - cz) ** 2
            along = np.abs(y - cy)
        else:
            radial = (y - cy) ** 2 + (z - cz) ** 2
            along = np.abs(x - cx)
        return (radial <= self.radius_mm**2) & (along <= self.half_length_mm)

    def to_json(self):
        return {
            "type": "cylinder",
            "center_mm": list(self.center_mm),
            "radius_mm": self.radius_mm,
            "half_length_mm": self.half_length_mm,
            "axis": self.axis,
        }


@dataclass(frozen=True)
class Sphere:
    center_mm: tuple
    radius_mm: float

    def __post_init__(self):
        if self.radius_mm <= 0:
            raise ConfigurationError("sphere radius must be positive")

    def contains(self, x, y, z):
        cx, cy, cz = self.center_mm
        return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= self.radius_mm**2

    def to_json(self):
        return {
            "type": "sphere",
            "center_mm": list(self.center_mm),
            "radius_mm": self.radius_mm,
        }


def shape_from_json(obj):
    kind = obj.get("type")
    if kind == "cylinder":
        return Cylinder(
            tuple(obj["center_mm"]), obj["radius_mm"], obj["half_length_mm"],
            obj.get("axis", "z"),
        )
    if kind == "sphere":
        return Sphere(tuple(obj["center_mm"]), obj["radius_mm"])
    raise ConfigurationError(f"unknown shape type {kind!r}")


@dataclass(frozen=True)
class MaterialSpectrum:
    """Tabulated coefficient versus wavelength, linearly interpolated."""

    wavelengths_nm: tuple
    values: tuple

    def __post_init__(self):
        wl = tuple(float(w) for w in self.wavelengths_nm)
        vals = tuple(float(v) for v in self.values)
        if len(wl) != len(vals) or len(wl) == 0:
            raise ConfigurationError("spectrum needs equal-length, non-empty tables")
        if any(b <= a for a, b in zip(wl, wl[1:])):
            raise ConfigurationError("spectrum wavelengths must strictly increase")
        object.__setattr__(self, "wavelengths_nm", wl)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, value, lo=600.0, hi=1000.0):
        return cls((lo, hi), (value, value))

    def at(self, wavelength_nm):
        wl = self.wavelengths_nm
        if not (wl[0] <= wavelength_nm <= wl[-1]):
            raise ConfigurationError(
                f"wavelength {wavelength_nm} nm outside table [{wl[0]}, {wl[-1]}]"
            )
        return float(np.interp(wavelength_nm, wl, self.values))


@dataclass(frozen=True)
class Material:
    """Optical and acoustic properties of one phantom constituent.

    mu_a/mu_s spectra are in 1/mm; g and n dimensionless; sound speed in
    mm/us; density in kg/m^3; grueneisen dimensionless.
    """

    name: str
    mu_a: MaterialSpectrum
    mu_s: MaterialSpectrum
    g: float = 0.7
    n: float = 1.4
    sound_speed: float = WATER_SOUND_SPEED_MM_PER_US
    density: float = WATER_DENSITY_KG_PER_M3
    grueneisen: float = 1.0

    def __post_init__(self):
        if not -1.0 < self.g < 1.0:
            raise ConfigurationError(f"anisotropy g={self.g} outside (-1, 1)")
        if self.n < 1.0:
            raise ConfigurationError(f"refractive index n={self.n} below 1")
        if self.sound_speed <= 0 or self.density <= 0:
            raise ConfigurationError("acoustic properties must be positive")

    def to_json(self):
        return {
            "name": self.name,
            "mu_a_per_mm": {"wavelengths_nm": list(self.mu_a.wavelengths_nm),
                            "values": list(self.mu_a.values)},
            "mu_s_per_mm": {"wavelengths_nm": list(self.mu_s.wavelengths_nm),
                            "values": list(self.mu_s.values)},
            "g": self.g,
            "n": self.n,
            "sound_speed_mm_per_us": self.sound_speed,
            "density_kg_per_m3": self.density,
            "grueneisen": self.grueneisen,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            name=obj["name"],
            mu_a=MaterialSpectrum(tuple(obj["mu_a_per_mm"]["wavelengths_nm"]),
                                  tuple(obj["mu_a_per_mm"]["values"])),
            mu_s=MaterialSpectrum(tuple(obj["mu_s_per_mm"]["wavelengths_nm"]),
                                  tuple(obj["mu_s_per_mm"]["values"])),
            g=obj["g"],
            n=obj["n"],
            sound_speed=obj["sound_speed_mm_per_us"],
            density=obj["density_kg_per_m3"],
            grueneisen=obj["grueneisen"],
        )


def water_material(name="water"):
    """Couplant: non-scattering water with tabulated absorption."""
    with resources.files("qpat.data").joinpath("water_absorption.csv").open() as fh:
        rows = [line.strip().split(",") for line in fh if line.strip()]
    header, rows = rows[0], rows[1:]
    if header != ["wavelength_nm", "mu_a_per_cm"]:
        raise ConfigurationError(f"unexpected water table header {header}")
    wl = tuple(float(r[0]) for r in rows)
    mu_a_mm = tuple(float(r[1]) / 10.0 for r in rows)  # 1/cm -> 1/mm
    return Material(
        name=name,
        mu_a=MaterialSpectrum(wl, mu_a_mm),
        mu_s=MaterialSpectrum.constant(0.0, wl[0], wl[-1]),
        g=0.0,
        n=1.33,
    )


@dataclass
class PhantomSpec:
    """Complete description of one phantom: materials plus labelled shapes.

    ``shapes`` maps label -> (shape, material name); labels 1 and up. Label 0
    (couplant) is implicit. ``inclusion_labels`` orders the inclusion labels
    for reporting.
    """

    materials: dict  # name -> Material
    couplant: str
    shapes: list  # [(label, shape, material_name)] in paint order
    phantom_id: str = "phantom"
    seed: int = None

    def __post_init__(self):
        if self.couplant not in self.materials:
            raise ConfigurationError(f"couplant material {self.couplant!r} not defined")
        for _, _, mat in self.shapes:
            if mat not in self.materials:
                raise ConfigurationError(f"shape references unknown material {mat!r}")
        labels = [lbl for lbl, _, _ in self.shapes]
        if len(set(labels)) != len(labels):
            raise ConfigurationError("duplicate shape labels")

    @property
    def inclusion_labels(self):
        return [lbl for lbl, _, _ in self.shapes if lbl >= FIRST_INCLUSION_LABEL]

    def material_for_label(self, label):
        if label == COUPLANT_LABEL:
            return self.materials[self.couplant]
        for lbl, _, mat in self.shapes:
            if lbl == label:
                return self.materials[mat]
        raise ConfigurationError(f"no shape with label {label}")

    def shape_for_label(self, label):
        for lbl, shape, _ in self.shapes:
            if lbl == label:
                return shape
        raise ConfigurationError(f"no shape with label {label}")

    def to_json(self):
        return {
            "phantom_id": self.phantom_id,
            "seed": self.seed,
            "couplant": self.couplant,
            "materials": {k: m.to_json() for k, m in self.materials.items()},
            "shapes": [
                {"label": lbl, "shape": shape.to_json(), "material": mat}
                for lbl, shape, mat in self.shapes
            ],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            materials={k: Material.from_json(v) for k, v in obj["materials"].items()},
            couplant=obj["couplant"],
            shapes=[
                (s["label"], shape_from_json(s["shape"]), s["material"])
                for s in obj["shapes"]
            ],
            phantom_id=obj.get("phantom_id", "phantom"),
            seed=obj.get("seed"),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return Path(path)

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def rasterize(spec, grid):
    """Paint shape labels onto the grid; later shapes win overlaps."""
    xs = grid.axis_centers(0)
    ys = grid.axis_centers(1)
    zs = grid.axis_centers(2)
    z3, y3, x3 = np.meshgrid(zs, ys, xs, indexing="ij")
    labels = np.full(grid.shape_zyx, COUPLANT_LABEL, dtype=np.int16)
    for label, shape, _ in spec.shapes:
        labels[shape.contains(x3, y3, z3)] = label
    return labels


@dataclass(frozen=True)
class PropertyVolumes:
    """Per-voxel coefficient maps at one wavelength (all arrays [z, y, x])."""

    wavelength_nm: float
    mu_a: np.ndarray  # 1/mm
    mu_s: np.ndarray  # 1/mm
    g: np.ndarray
    grueneisen: np.ndarray
    sound_speed: np.ndarray  # mm/us
    density: np.ndarray  # kg/m^3


def assign_properties(spec, labels, wavelength_nm):
    """Map labels to per-voxel optical/acoustic coefficients at one wavelength."""
    present = np.unique(labels)
    lut_size = int(present.max()) + 1
    lut = {
        "mu_a": np.zeros(lut_size, dtype=np.float32),
        "mu_s": np.zeros(lut_size, dtype=np.float32),
        "g": np.zeros(lut_size, dtype=np.float32),
        "grueneisen": np.zeros(lut_size, dtype=np.float32),
        "sound_speed": np.zeros(lut_size, dtype=np.float32),
        "density": np.zeros(lut_size, dtype=np.float32),
    }
    for label in present:
        mat = spec.material_for_label(int(label))
        lut["mu_a"][label] = mat.mu_a.at(wavelength_nm)
        lut["mu_s"][label] = mat.mu_s.at(wavelength_nm)
        lut["g"][label] = mat.g
        lut["grueneisen"][label] = mat.grueneisen
        lut["sound_speed"][label] = mat.sound_speed
        lut["density"][label] = mat.density
    vols = {key: table[labels] for key, table in lut.items()}
    for key in ("mu_a", "mu_s"):
        if not np.all(np.isfinite(vols[key])) or np.any(vols[key] < 0):
            raise DomainError(f"non-finite or negative {key} in property volume")
    return PropertyVolumes(wavelength_nm=float(wavelength_nm), **vols)


@dataclass(frozen=True)
class SamplerConfig:
    """Ranges for random phantom generation (bench units where noted)."""

    cylinder_diameter_mm: float = 27.5
    inclusion_count: tuple = (0, 3)
    inclusion_radius_mm: tuple = (1.5, 5.0)
    mu_a_range_per_cm: tuple = (0.05, 4.0)  # at the 800 nm reference
    mu_s_prime_range_per_cm: tuple = (5.0, 15.0)
    # optional separate background ranges (None: reuse the shared ranges);
    # lets studies keep backgrounds in the optically soft regime where
    # interior fluence stays within the usable imaging dynamic range
    background_mu_a_range_per_cm: tuple = None
    background_mu_s_prime_range_per_cm: tuple = None
    g: float = 0.7
    n: float = 1.4
    margin_mm: float = 0.5  # clearance inclusion-to-boundary and inclusion-to-inclusion
    grueneisen: float = 1.0
    max_placement_attempts: int = 100

    def validate(self):
        if self.cylinder_diameter_mm <= 0:
            raise ConfigurationError("cylinder diameter must be positive")
        lo, hi = self.inclusion_count
        if not (0 <= lo <= hi):
            raise ConfigurationError(f"bad inclusion count range {self.inclusion_count}")
        for name in ("inclusion_radius_mm", "mu_a_range_per_cm",
                     "mu_s_prime_range_per_cm", "background_mu_a_range_per_cm",
                     "background_mu_s_prime_range_per_cm"):
            value = getattr(self, name)
            if value is None:
                continue
            lo, hi = value
            if not (0 < lo <= hi):
                raise ConfigurationError(f"bad range {name}={value}")


def _sampled_material(name, rng, config, mu_a_range=None, mu_s_prime_range=None):
    # Flat two-point spectra: the sampling ranges are defined at the 800 nm
    # reference and the quantification study is single-wavelength.
    mu_a_mm = rng.uniform(*(mu_a_range or config.mu_a_range_per_cm)) / 10.0
    mu_sp_mm = rng.uniform(*(mu_s_prime_range
                             or config.mu_s_prime_range_per_cm)) / 10.0
    mu_s_mm = mu_sp_mm / (1.0 - config.g)
    return Material(
        name=name,
        mu_a=MaterialSpectrum.constant(mu_a_mm, 700.0, 900.0),
        mu_s=MaterialSpectrum.constant(mu_s_mm, 700.0, 900.0),
        g=config.g,
        n=config.n,
        grueneisen=config.grueneisen,
    )


def sample_phantom(seed, config=None, half_length_mm=40.0, phantom_id=None):
    """Draw a random phantom: background cylinder plus 0-3 rod inclusions.

    Deterministic in ``seed``. Inclusions are placed by rejection sampling,
    fully inside the background disc with ``margin_mm`` clearance and
    non-overlapping; placement gives up after ``max_placement_attempts`` and
    drops the inclusion so the sampler is total.
    """
    config = config or SamplerConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    bg_radius = 0.5 * config.cylinder_diameter_mm

    materials = {"water": water_material()}
    materials["background"] = _sampled_material(
        "background", rng, config,
        mu_a_range=config.background_mu_a_range_per_cm,
        mu_s_prime_range=config.background_mu_s_prime_range_per_cm)
    shapes = [(BACKGROUND_LABEL,
               Cylinder((0.0, 0.0, 0.0), bg_radius, half_length_mm), "background")]

    lo, hi = config.inclusion_count
    n_inc = int(rng.integers(lo, hi + 1))
    placed = []  # (cx, cy, r)
    for k in range(n_inc):
        r = rng.uniform(*config.inclusion_radius_mm)
        max_center = bg_radius - r - config.margin_mm
        if max_center <= 0:
            continue
        for _ in range(config.max_placement_attempts):
            # uniform over the admissible disc of centre positions
            rad = max_center * math.sqrt(rng.uniform())
            ang = rng.uniform(0.0, 2.0 * math.pi)
            cx, cy = rad * math.cos(ang), rad * math.sin(ang)
            if all((cx - px) ** 2 + (cy - py) ** 2 >= (r + pr + config.margin_mm) ** 2
                   for px, py, pr in placed):
                placed.append((cx, cy, r))
                name = f"inclusion_{len(placed)}"
                materials[name] = _sampled_material(name, rng, config)
                shapes.append((
                    FIRST_INCLUSION_LABEL + len(placed) - 1,
                    Cylinder((cx, cy, 0.0), r, half_length_mm),
                    name,
                ))
                break

    return PhantomSpec(
        materials=materials,
        couplant="water",
        shapes=shapes,
        phantom_id=phantom_id or f"phantom_{seed}",
        seed=seed,
    )


def slice_region_masks(spec, xs_mm, ys_mm, z_mm=0.0):
    """Region masks on an arbitrary pixel grid cut at height z.

    Returns {label: bool mask [ny, nx]} with the background mask excluding
    inclusions (class membership, not paint order).
    """
    x2, y2 = np.meshgrid(xs_mm, ys_mm)
    z2 = np.full_like(x2, z_mm)
    labels = np.full(x2.shape, COUPLANT_LABEL, dtype=np.int16)
    for label, shape, _ in spec.shapes:
        labels[shape.contains(x2, y2, z2)] = label
    return {int(lbl): labels == lbl for lbl in np.unique(labels)}


def reference_mu_a_per_mm(spec, label, wavelength_nm):
    return spec.material_for_label(label).mu_a.at(wavelength_nm)


def deep_copy_spec(spec):
    return copy.deepcopy(spec)
