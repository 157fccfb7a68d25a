"""Compiled photon-transport kernels.

Everything here is numba-jitted and deliberately free of Python objects: the
public API, validation, and normalisation live in photon.py.

Randomness: one counter-based stream per photon, derived from
(seed, photon index) via splitmix64 (state += GAMMA, output = finalised
state). Streams make per-photon histories independent of scheduling, and
tallies go into per-slot buffers (photons strided over a fixed slot count)
merged in fixed order afterwards, so results are bit-identical for any
thread count.
"""

import math

import numpy as np
from numba import njit, prange

U64 = np.uint64
GAMMA = U64(0x9E3779B97F4A7C15)
INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> U64(30))) * U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> U64(27))) * U64(0x94D4A81E27B2C2D3)
    return z ^ (z >> U64(31))


@njit(cache=True, inline="always")
def stream_init(seed, index):
    return _mix64(U64(seed) + U64(index) * GAMMA)


@njit(cache=True, inline="always")
def stream_next(state):
    state = state + GAMMA
    return state, (_mix64(state) >> U64(11)) * INV_2_53


@njit(cache=True, inline="always")
def hg_cos_theta(g, xi):
    # inverse CDF of the Henyey-Greenstein phase function
    if g > 1e-6 or g < -1e-6:
        tmp = (1.0 - g * g) / (1.0 - g + 2.0 * g * xi)
        ct = (1.0 + g * g - tmp * tmp) / (2.0 * g)
        if ct > 1.0:
            ct = 1.0
        elif ct < -1.0:
            ct = -1.0
        return ct
    return 2.0 * xi - 1.0


@njit(cache=True, inline="always")
def _deflect(ux, uy, uz, ct, phi):
    st = math.sqrt(max(0.0, 1.0 - ct * ct))
    cp = math.cos(phi)
    sp = math.sin(phi)
    if abs(uz) > 0.99999:
        nx = st * cp
        ny = st * sp
        nz = ct if uz > 0.0 else -ct
    else:
        den = math.sqrt(1.0 - uz * uz)
        nx = st * (ux * uz * cp - uy * sp) / den + ux * ct
        ny = st * (uy * uz * cp + ux * sp) / den + uy * ct
        nz = -st * cp * den + uz * ct
    norm = math.sqrt(nx * nx + ny * ny + nz * nz)
    return nx / norm, ny / norm, nz / norm


@njit(cache=True)
def sample_hg_batch(g, n, seed):
    cts = np.empty(n, dtype=np.float64)
    phis = np.empty(n, dtype=np.float64)
    for i in range(n):
        st = stream_init(seed, i)
        st, xi = stream_next(st)
        cts[i] = hg_cos_theta(g, xi)
        st, xi = stream_next(st)
        phis[i] = 2.0 * math.pi * xi
    return cts, phis


@njit(cache=True, inline="always")
def _ray_box_entry(x, y, z, ux, uy, uz, x1, y1, z1):
    """Entry distance of a ray into the box [0,x1]x[0,y1]x[0,z1]; -1 if it misses.

    Coordinates are already grid-relative (origin at the box corner).
    """
    t0 = 0.0
    t1 = 1.0e30
    if abs(ux) > 1e-300:
        ta = (0.0 - x) / ux
        tb = (x1 - x) / ux
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif x < 0.0 or x > x1:
        return -1.0
    if abs(uy) > 1e-300:
        ta = (0.0 - y) / uy
        tb = (y1 - y) / uy
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif y < 0.0 or y > y1:
        return -1.0
    if abs(uz) > 1e-300:
        ta = (0.0 - z) / uz
        tb = (z1 - z) / uz
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif z < 0.0 or z > z1:
        return -1.0
    if t1 <= t0:
        return -1.0
    return t0


@njit(cache=True, parallel=True)
def run_transport(mu_a, mu_s, gvol, dx, dy, dz,
                  origins, directions, spot_radius, cos_div_max,
                  n_photons, seed, n_slots,
                  roulette_threshold, roulette_survive):
    """Trace photons and tally per-voxel track-length integrals of weight.

    Returns (tally[slot, z, y, x], stats[slot, 0:3]) with stats columns
    (absorbed, escaped, roulette_net). Weight decays continuously with
    absorption along every substep; distance to the next scattering event is
    sampled from mu_s alone. Fluence is tally / (voxel volume * n_photons).
    """
    nz, ny, nx = mu_a.shape
    n_bundles = origins.shape[0]
    x1 = nx * dx
    y1 = ny * dy
    z1 = nz * dz
    tally = np.zeros((n_slots, nz, ny, nx), dtype=np.float64)
    stats = np.zeros((n_slots, 3), dtype=np.float64)
    inv_survive = 1.0 / roulette_survive

    for slot in prange(n_slots):
        absorbed = 0.0
        escaped = 0.0
        roulette_net = 0.0
        for idx in range(slot, n_photons, n_slots):
            st = stream_init(seed, idx)

            # --- launch ---
            if n_bundles > 1:
                st, xi = stream_next(st)
                b = int(xi * n_bundles)
                if b >= n_bundles:
                    b = n_bundles - 1
            else:
                b = 0
            px = origins[b, 0]
            py = origins[b, 1]
            pz = origins[b, 2]
            ux = directions[b, 0]
            uy = directions[b, 1]
            uz = directions[b, 2]
            if spot_radius > 0.0:
                # uniform disc perpendicular to the bundle axis
                st, xi = stream_next(st)
                rr = spot_radius * math.sqrt(xi)
                st, xi = stream_next(st)
                ang = 2.0 * math.pi * xi
                if abs(uz) < 0.9:
                    bx = uy * 1.0 - uz * 0.0
                    by = uz * 0.0 - ux * 1.0
                    bz = ux * 0.0 - uy * 0.0
                else:
                    bx = uy * 0.0 - uz * 1.0
                    by = uz * 0.0 - ux * 0.0
                    bz = ux * 1.0 - uy * 0.0
                nb_ = math.sqrt(bx * bx + by * by + bz * bz)
                bx /= nb_
                by /= nb_
                bz /= nb_
                cx = uy * bz - uz * by
                cy = uz * bx - ux * bz
                cz = ux * by - uy * bx
                px += rr * (math.cos(ang) * bx + math.sin(ang) * cx)
                py += rr * (math.cos(ang) * by + math.sin(ang) * cy)
                pz += rr * (math.cos(ang) * bz + math.sin(ang) * cz)
            if cos_div_max < 1.0:
                # uniform over the spherical cap around the bundle axis
                st, xi = stream_next(st)
                ct = 1.0 - xi * (1.0 - cos_div_max)
                st, xi = stream_next(st)
                ux, uy, uz = _deflect(ux, uy, uz, ct, 2.0 * math.pi * xi)

            t_in = _ray_box_entry(px, py, pz, ux, uy, uz, x1, y1, z1)
            if t_in < 0.0:
                escaped += 1.0
                continue
            px += ux * t_in
            py += uy * t_in
            pz += uz * t_in
            ix = int(math.floor(px / dx))
            iy = int(math.floor(py / dy))
            iz = int(math.floor(pz / dz))
            if ix < 0:
                ix = 0
            elif ix >= nx:
                ix = nx - 1
            if iy < 0:
                iy = 0
            elif iy >= ny:
                iy = ny - 1
            if iz < 0:
                iz = 0
            elif iz >= nz:
                iz = nz - 1

            w = 1.0
            st, xi = stream_next(st)
            sleft = -math.log(1.0 - xi)  # dimensionless scattering budget

            # --- voxel-stepping loop ---
            while True:
                ma = mu_a[iz, iy, ix]
                ms = mu_s[iz, iy, ix]

                tb = 1.0e30
                axis = 0
                sgn = 0
                if ux > 0.0:
                    t = ((ix + 1) * dx - px) / ux
                    if t < tb:
                        tb = t
                        axis = 0
                        sgn = 1
                elif ux < 0.0:
                    t = (ix * dx - px) / ux
                    if t < tb:
                        tb = t
                        axis = 0
                        sgn = -1
                if uy > 0.0:
                    t = ((iy + 1) * dy - py) / uy
                    if t < tb:
                        tb = t
                        axis = 1
                        sgn = 1
                elif uy < 0.0:
                    t = (iy * dy - py) / uy
                    if t < tb:
                        tb = t
                        axis = 1
                        sgn = -1
                if uz > 0.0:
                    t = ((iz + 1) * dz - pz) / uz
                    if t < tb:
                        tb = t
                        axis = 2
                        sgn = 1
                elif uz < 0.0:
                    t = (iz * dz - pz) / uz
                    if t < tb:
                        tb = t
                        axis = 2
                        sgn = -1
                if tb < 0.0:
                    tb = 0.0

                t_scat = sleft / ms if ms > 0.0 else 1.0e30
                scatter_here = t_scat <= tb
                step = t_scat if scatter_here else tb

                if ma > 0.0:
                    att = math.exp(-ma * step)
                    tally[slot, iz, iy, ix] += w * (1.0 - att) / ma
                    absorbed += w * (1.0 - att)
                    w *= att
                else:
                    tally[slot, iz, iy, ix] += w * step

                px += ux * step
                py += uy * step
                pz += uz * step

                if scatter_here:
                    st, xi = stream_next(st)
                    ct = hg_cos_theta(gvol[iz, iy, ix], xi)
                    st, xi = stream_next(st)
                    ux, uy, uz = _deflect(ux, uy, uz, ct, 2.0 * math.pi * xi)
                    st, xi = stream_next(st)
                    sleft = -math.log(1.0 - xi)
                else:
                    sleft -= ms * step
                    if axis == 0:
                        ix += sgn
                        px = (ix if sgn > 0 else ix + 1) * dx
                        if ix < 0 or ix >= nx:
                            escaped += w
                            break
                    elif axis == 1:
                        iy += sgn
                        py = (iy if sgn > 0 else iy + 1) * dy
                        if iy < 0 or iy >= ny:
                            escaped += w
                            break
                    else:
                        iz += sgn
                        pz = (iz if sgn > 0 else iz + 1) * dz
                        if iz < 0 or iz >= nz:
                            escaped += w
                            break

                if w < roulette_threshold:
                    st, xi = stream_next(st)
                    if xi < roulette_survive:
                        roulette_net -= w * (inv_survive - 1.0)
                        w *= inv_survive
                    else:
                        roulette_net += w
                        break

        stats[slot, 0] = absorbed
        stats[slot, 1] = escaped
        stats[slot, 2] = roulette_net
    return tally, stats
