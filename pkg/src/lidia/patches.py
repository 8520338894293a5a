"""Patch machinery: mirror padding, extraction/aggregation, windowed kNN, two-scale pyramid.

Every linear operation on patches is expressed through integer gather maps into
a flat ``(H*W*C,)`` canvas.  Extraction is ``canvas[idx]``; its adjoint is a
scatter-add (``np.bincount``), which is sequential and therefore bit-reproducible.
Mirror padding is folded into the maps, so weighted overlap-averaging is the
exact adjoint of extraction from the *unpadded* image.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .image_io import as_plane, luminance

LP_TAPS_1D = np.array([1.0, 2.0, 1.0]) / 4.0
LP_KERNEL = np.outer(LP_TAPS_1D, LP_TAPS_1D)  # (1/16) [1 2 1]^T [1 2 1]
PHASES = ("ee", "eo", "oe", "oo")  # (row parity, column parity)

_KNN_CHUNK = 1024


class PatchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PatchConfig:
    patch_side: int = 7
    channels: int = 1
    k: int = 14
    window: int = 37
    scales: int = 2

    def __post_init__(self):
        if self.patch_side < 1 or self.patch_side % 2 == 0:
            raise PatchConfigError(f"patch_side must be odd and positive, got {self.patch_side}")
        if self.window % 2 == 0 or self.window < self.patch_side:
            raise PatchConfigError(f"window must be odd and >= patch_side, got {self.window}")
        if self.channels not in (1, 3):
            raise PatchConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.k < 1:
            raise PatchConfigError(f"k must be >= 1, got {self.k}")
        if self.scales != 2:
            raise PatchConfigError("only two-scale pyramids are implemented")

    @property
    def n(self) -> int:
        return self.patch_side**2 * self.channels

    @property
    def half(self) -> int:
        return self.patch_side // 2


@dataclass
class PatchGroup:
    """A seed patch and its k-1 nearest neighbours.

    ``seed`` and ``neighbors`` are (row, col) coordinates in the plane that was
    searched (the image itself at scale 1, a phase plane at scale 2).
    """

    seed: tuple[int, int]
    Z: np.ndarray  # (n, k), column 0 is the seed patch
    dist: np.ndarray  # (k,), [var(z), d_1, ..., d_{k-1}]
    neighbors: list[tuple[int, int]] = field(default_factory=list)
    phase: str | None = None


@dataclass
class ScalePyramid:
    full: np.ndarray  # padded input, scale 1
    filtered: np.ndarray  # f_LP * input, unpadded
    phases: dict[str, np.ndarray]  # padded phase planes of `filtered`
    margin: int


# --------------------------------------------------------------------- padding


def reflect_index(length: int, margin: int) -> np.ndarray:
    """Source index for each position of a mirror-padded axis (border pixel not repeated)."""
    if margin >= length:
        raise PatchConfigError(f"mirror margin {margin} must be < axis length {length}")
    i = np.arange(-margin, length + margin)
    i = np.abs(i)
    return np.where(i >= length, 2 * (length - 1) - i, i)


def mirror_pad(img, margin: int) -> np.ndarray:
    a = as_plane(img)
    h, w = a.shape[:2]
    if margin >= min(h, w):
        raise PatchConfigError(f"margin {margin} too large for a {h}x{w} image")
    if margin == 0:
        return a.copy()
    return np.pad(a, ((margin, margin), (margin, margin), (0, 0)), mode="reflect")


# ----------------------------------------------------------------- gather maps


def patch_index(height: int, width: int, channels: int, patch_side: int, *, stride: int = 1) -> np.ndarray:
    """Gather map ``(H*W, n)`` of every patch into the flat ``(H*W*C,)`` image.

    Row ``l = y*W + x`` holds the patch centred at (y, x), flattened row-major
    with channels interleaved.  With ``stride=2`` patch pixels are spaced two
    apart and mirroring happens inside the pixel's own parity phase plane.
    """
    h = patch_side // 2
    off = np.arange(-h, h + 1)
    if stride == 1:
        ry = reflect_index(height, h)[np.arange(height)[:, None] + h + off]  # (H, p)
        rx = reflect_index(width, h)[np.arange(width)[:, None] + h + off]  # (W, p)
    elif stride == 2:
        ry = _phase_axis_map(height, off)
        rx = _phase_axis_map(width, off)
    else:
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    pix = ry[:, None, :, None] * width + rx[None, :, None, :]  # (H, W, p, p)
    idx = pix[..., None] * channels + np.arange(channels)
    return idx.reshape(height * width, patch_side * patch_side * channels)


def _phase_axis_map(length: int, off: np.ndarray) -> np.ndarray:
    out = np.empty((length, off.size), dtype=np.int64)
    for parity in (0, 1):
        plen = (length - parity + 1) // 2
        refl = reflect_index(plen, int(np.abs(off).max()))
        pos = np.arange(plen)
        out[parity::2] = 2 * refl[pos[:, None] + off.max() + off] + parity
    return out


def lowpass_taps(height: int, width: int, channels: int, *, per_phase: bool = False):
    """f_LP as nine ``(coef, gather map)`` pairs over the flat image, mirror boundary.

    ``per_phase`` filters each parity phase plane independently (taps two
    pixels apart, mirrored inside the phase).
    """
    off = np.arange(-1, 2)
    if per_phase:
        ry, rx = _phase_axis_map(height, off), _phase_axis_map(width, off)
    else:
        ry = reflect_index(height, 1)[np.arange(height)[:, None] + 1 + off]
        rx = reflect_index(width, 1)[np.arange(width)[:, None] + 1 + off]
    taps = []
    ch = np.arange(channels)
    for a in range(3):
        for b in range(3):
            pix = ry[:, a][:, None] * width + rx[:, b][None, :]
            taps.append((LP_KERNEL[a, b], (pix[..., None] * channels + ch).ravel()))
    return taps


def apply_taps(flat: np.ndarray, taps) -> np.ndarray:
    out = np.zeros_like(flat)
    for c, idx in taps:
        out += c * flat[idx]
    return out


def apply_taps_adjoint(flat: np.ndarray, taps) -> np.ndarray:
    out = np.zeros(flat.shape, dtype=np.float64)
    for c, idx in taps:
        out += np.bincount(idx, weights=c * flat, minlength=flat.size)
    return out.astype(flat.dtype, copy=False)


def scatter_add(idx: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    return np.bincount(idx.ravel(), weights=np.asarray(values, dtype=np.float64).ravel(), minlength=size)


# ------------------------------------------------------------------ extraction


def extract_patch(padded, center, cfg: PatchConfig) -> np.ndarray:
    """Patch around ``center`` (coordinates in the padded image), flattened row-major, channel-interleaved."""
    a = as_plane(padded)
    r, c = center
    h = cfg.half
    if not (h <= r < a.shape[0] - h and h <= c < a.shape[1] - h):
        raise IndexError(f"patch centre {center} leaves the {a.shape[0]}x{a.shape[1]} padded image")
    return a[r - h : r + h + 1, c - h : c + h + 1, :].reshape(-1).copy()


def extract_patches(img, cfg: PatchConfig, *, stride: int = 1) -> np.ndarray:
    """All patches of an unpadded image, one row per pixel in raster order."""
    a = as_plane(img)
    idx = patch_index(a.shape[0], a.shape[1], a.shape[2], cfg.patch_side, stride=stride)
    return a.reshape(-1)[idx]


def aggregate(patches, weights, shape, cfg: PatchConfig, *, stride: int = 1, post_filter: bool = False) -> np.ndarray:
    """Weighted overlap-averaging of one patch per pixel: (sum w R^T R)^-1 sum w R^T z.

    ``patches`` is ``(H*W, n)`` in raster order of the seed pixels.  The normal
    matrix is diagonal (per-pixel weighted coverage), so the solve is a division.
    ``post_filter`` applies f_LP to the result, per phase plane when ``stride=2``.
    """
    h, w = shape[:2]
    c = shape[2] if len(shape) > 2 else cfg.channels
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (h * w, cfg.patch_side**2 * c):
        raise ValueError(f"expected patches of shape {(h * w, cfg.patch_side**2 * c)}, got {patches.shape}")
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), (h * w,))
    idx = patch_index(h, w, c, cfg.patch_side, stride=stride)
    num = scatter_add(idx, weights[:, None] * patches, h * w * c)
    den = scatter_add(idx, np.broadcast_to(weights[:, None], idx.shape), h * w * c)
    if np.any(den == 0):
        raise RuntimeError("aggregation left a pixel with zero coverage")
    out = num / den
    if post_filter:
        out = apply_taps(out, lowpass_taps(h, w, c, per_phase=stride == 2))
    return out.reshape(h, w, c)


# ------------------------------------------------------------------------ kNN


def _search_plane(img) -> np.ndarray:
    a = as_plane(img)
    return luminance(a) if a.shape[2] == 3 else a


def _check_candidates(height: int, width: int, cfg: PatchConfig) -> None:
    r = cfg.window // 2
    worst = min(r + 1, height) * min(r + 1, width)
    if worst < cfg.k:
        raise PatchConfigError(
            f"search window {cfg.window} on a {height}x{width} plane yields only {worst} "
            f"candidates at the corners, need k={cfg.k}"
        )


def knn_group(img, center, cfg: PatchConfig) -> PatchGroup:
    """Group for one seed pixel of an unpadded image.

    Candidates are all pixels of the image inside the b x b window around
    ``center`` (the window is clipped at the image border), scanned in
    row-major order.  Distances use luminance patches on colour images.
    """
    a = as_plane(img)
    H, W, _ = a.shape
    _check_candidates(H, W, cfg)
    y, x = center
    if not (0 <= y < H and 0 <= x < W):
        raise IndexError(f"centre {center} outside the {H}x{W} image")
    h, r = cfg.half, cfg.window // 2
    padded = mirror_pad(a, h)
    search = mirror_pad(_search_plane(a), h)
    seed = extract_patch(search, (y + h, x + h), cfg)
    cand, d = [], []
    for yy in range(max(0, y - r), min(H, y + r + 1)):
        for xx in range(max(0, x - r), min(W, x + r + 1)):
            if (yy, xx) == (y, x):
                continue
            cand.append((yy, xx))
            d.append(np.sum((extract_patch(search, (yy + h, xx + h), cfg) - seed) ** 2))
    order = np.argsort(np.asarray(d), kind="stable")[: cfg.k - 1]
    nbrs = [cand[j] for j in order]
    cols = [extract_patch(padded, (y + h, x + h), cfg)]
    cols += [extract_patch(padded, (yy + h, xx + h), cfg) for yy, xx in nbrs]
    z0 = cols[0]
    dist = np.concatenate([[np.var(z0, ddof=1) if z0.size > 1 else 0.0], np.asarray(d)[order]])
    return PatchGroup(seed=(y, x), Z=np.stack(cols, axis=1), dist=dist, neighbors=nbrs)


@numba.njit(cache=True, nogil=True)
def _knn_rows(lp, H, W, p, r, k, start, stop, nbr, dist):
    """Windowed exhaustive search for raster locations [start, stop).

    ``lp`` is the search plane mirror-padded by p // 2.  Distances are summed
    in row-major patch order; a candidate enters the running top-(k-1) list
    only if strictly closer, so ties keep row-major scan order.
    """
    best_d = np.empty(k, np.float64)
    best_i = np.empty(k, np.int64)
    for l in range(start, stop):
        y = l // W
        x = l - y * W
        m = 0
        for yy in range(max(0, y - r), min(H, y + r + 1)):
            for xx in range(max(0, x - r), min(W, x + r + 1)):
                if yy == y and xx == x:
                    continue
                d = 0.0
                for a in range(p):
                    for b in range(p):
                        t = lp[yy + a, xx + b] - lp[y + a, x + b]
                        d += t * t
                if m < k - 1:
                    j = m
                    m += 1
                elif d < best_d[k - 2]:
                    j = k - 2
                else:
                    continue
                while j > 0 and best_d[j - 1] > d:
                    best_d[j] = best_d[j - 1]
                    best_i[j] = best_i[j - 1]
                    j -= 1
                best_d[j] = d
                best_i[j] = yy * W + xx
        nbr[l, 0] = l
        for j in range(k - 1):
            nbr[l, j + 1] = best_i[j]
            dist[l, j + 1] = best_d[j]


def knn_all(img, cfg: PatchConfig, *, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """kNN for every pixel of an unpadded plane.

    Returns ``(nbr, dist)``, both ``(H*W, k)``: ``nbr[:, 0]`` is the seed's own
    raster index and ``dist[:, 0]`` the unbiased variance of the seed patch
    (on all channels).  Work is split into fixed row chunks, so the result does
    not depend on ``threads``.
    """
    a = as_plane(img)
    H, W, C = a.shape
    _check_candidates(H, W, cfg)
    L = H * W
    lp = np.ascontiguousarray(mirror_pad(_search_plane(a), cfg.half)[:, :, 0])
    nbr = np.empty((L, cfg.k), dtype=np.int64)
    dist = np.empty((L, cfg.k), dtype=np.float64)

    def run(start: int) -> None:
        _knn_rows(lp, H, W, cfg.patch_side, cfg.window // 2, cfg.k, start, min(L, start + _KNN_CHUNK), nbr, dist)

    starts = range(0, L, _KNN_CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(run, starts))
    else:
        for s in starts:
            run(s)
    full = a.reshape(-1)[patch_index(H, W, C, cfg.patch_side)]
    dist[:, 0] = np.var(full, axis=1, ddof=1) if full.shape[1] > 1 else 0.0
    return nbr, dist


# -------------------------------------------------------------------- pyramid


def lowpass(img) -> np.ndarray:
    """Convolve with f_LP using mirror boundaries (same size output)."""
    a = as_plane(img)
    H, W, C = a.shape
    return apply_taps(a.reshape(-1), lowpass_taps(H, W, C)).reshape(H, W, C)


def phase_planes(img) -> dict[str, np.ndarray]:
    a = as_plane(img)
    return {name: a[int(name[0] == "o") :: 2, int(name[1] == "o") :: 2] for name in PHASES}


def phase_of(center) -> tuple[str, tuple[int, int]]:
    """Phase plane holding full-resolution pixel ``center`` and its coordinates there."""
    r, c = center
    return ("eo"[r % 2] + "eo"[c % 2]), (r // 2, c // 2)


def build_pyramid(img, cfg: PatchConfig) -> ScalePyramid:
    a = as_plane(img)
    if min(a.shape[:2]) < 2 * cfg.patch_side:
        raise PatchConfigError(
            f"image {a.shape[0]}x{a.shape[1]} is smaller than twice the patch side {cfg.patch_side}"
        )
    f = lowpass(a)
    return ScalePyramid(
        full=mirror_pad(a, cfg.half),
        filtered=f,
        phases={k: mirror_pad(v, cfg.half) for k, v in phase_planes(f).items()},
        margin=cfg.half,
    )


def interleave_phases(phases: dict[str, np.ndarray], height: int, width: int) -> np.ndarray:
    """Inverse of :func:`phase_planes` for unpadded phase planes."""
    c = next(iter(phases.values())).shape[2]
    out = np.empty((height, width, c))
    for name, p in phases.items():
        out[int(name[0] == "o") :: 2, int(name[1] == "o") :: 2] = p
    return out


def second_scale_group(pyr: ScalePyramid, center, cfg: PatchConfig) -> PatchGroup:
    """Scale-2 group for full-resolution pixel ``center``, searched in its own phase plane."""
    name, (pr, pc) = phase_of(center)
    m = pyr.margin
    plane = pyr.phases[name][m:-m, m:-m] if m else pyr.phases[name]
    if not (0 <= pr < plane.shape[0] and 0 <= pc < plane.shape[1]):
        raise IndexError(f"centre {center} outside the image")
    g = knn_group(plane, (pr, pc), cfg)
    g.phase = name
    return g


def second_scale_knn(filtered, cfg: PatchConfig, *, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """kNN at scale 2 for every full-resolution pixel, returned in full-resolution raster indices."""
    a = as_plane(filtered)
    H, W, _ = a.shape
    nbr = np.empty((H * W, cfg.k), dtype=np.int64)
    dist = np.empty((H * W, cfg.k))
    full_index = np.arange(H * W).reshape(H, W)
    for name, plane in phase_planes(a).items():
        pi, pj = int(name[0] == "o"), int(name[1] == "o")
        local = full_index[pi::2, pj::2].reshape(-1)
        n_local, d_local = knn_all(plane, cfg, threads=threads)
        nbr[local] = local[n_local]
        dist[local] = d_local
    return nbr, dist
