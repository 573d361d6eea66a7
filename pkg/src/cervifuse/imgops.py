"""Deterministic pixel-level image transforms.

Images are uint8 numpy arrays, [H x W] grayscale or [H x W x 3] RGB. Every
op preserves shape and dtype and keeps values in [0, 255]. Randomness is
never drawn here; callers sample parameters and pass them in explicitly.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

from .errors import InvalidParameterError


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.size == 0:
        raise InvalidParameterError("image is empty")
    if img.dtype != np.uint8:
        raise InvalidParameterError(f"expected uint8 image, got {img.dtype}")
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise InvalidParameterError(f"expected HxW or HxWx3 image, got shape {img.shape}")
    return img


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def luminance(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma as float64, [H x W]."""
    img = _check_image(img)
    if img.ndim == 2:
        return img.astype(np.float64)
    f = img.astype(np.float64)
    return 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]


def _bilinear_gather(img_f: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample float image at fractional coords with nearest-edge replication."""
    h, w = img_f.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None] if img_f.ndim == 3 else xs - x0
    fy = (ys - y0)[..., None] if img_f.ndim == 3 else ys - y0
    v00 = img_f[y0, x0]
    v01 = img_f[y0, x1]
    v10 = img_f[y1, x0]
    v11 = img_f[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def affine(img: np.ndarray, rot_deg: float = 0.0, scale: float = 1.0,
           tx: float = 0.0, ty: float = 0.0, shear_deg: float = 0.0,
           flip_h: bool = False, flip_v: bool = False) -> np.ndarray:
    """Composed affine warp about the image center.

    Output pixels are inverse-mapped and bilinearly sampled; coordinates
    falling outside the source are filled by nearest-edge replication.
    tx/ty are in pixels, positive shifts move content right/down.
    """
    img = _check_image(img)
    if scale == 0:
        raise InvalidParameterError("affine scale must be nonzero")
    h, w = img.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    theta = np.deg2rad(rot_deg)
    sh = np.tan(np.deg2rad(shear_deg))
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shear = np.array([[1.0, sh], [0.0, 1.0]])
    lin = rot @ shear * scale
    if flip_h:
        lin = lin @ np.diag([-1.0, 1.0])
    if flip_v:
        lin = lin @ np.diag([1.0, -1.0])

    inv = np.linalg.inv(lin)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xs - cx - tx
    dy = ys - cy - ty
    src_x = inv[0, 0] * dx + inv[0, 1] * dy + cx
    src_y = inv[1, 0] * dx + inv[1, 1] * dy + cy
    return _to_uint8(_bilinear_gather(img.astype(np.float64), src_x, src_y))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers. Same-size input is returned
    unchanged (bit-identical)."""
    img = _check_image(img)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    return _to_uint8(_bilinear_gather(img.astype(np.float64), grid_x, grid_y))


def _clipped_equalization_map(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """256-entry equalization lookup from a clipped histogram.

    Bins above clip_limit * total / 256 are trimmed and the excess spread
    uniformly, then v -> round(255 * (cdf(v) - cdf_min) / (total - cdf_min)).
    A single occupied bin leaves values unchanged, so a constant region never
    gains contrast.
    """
    total = int(hist.sum())
    clip = max(1, int(clip_limit * total / 256.0))
    h = hist.astype(np.int64).copy()
    excess = int((h - clip).clip(min=0).sum())
    np.minimum(h, clip, out=h)
    h += excess // 256
    h[: excess % 256] += 1
    cdf = np.cumsum(h)
    cmin = int(cdf[np.flatnonzero(h)[0]])
    if total == cmin:
        return np.arange(256, dtype=np.uint8)
    scaled = 255.0 * (cdf - cmin) / (total - cmin)
    return _to_uint8(np.clip(scaled, 0.0, 255.0))


def _clahe_channel(chan: np.ndarray, tile_grid, clip_limit: float) -> np.ndarray:
    gh, gw = tile_grid
    h, w = chan.shape
    y_edges = np.linspace(0, h, gh + 1).astype(int)
    x_edges = np.linspace(0, w, gw + 1).astype(int)
    maps = np.empty((gh, gw, 256), dtype=np.uint8)
    centers_y = np.empty(gh)
    centers_x = np.empty(gw)
    for i in range(gh):
        centers_y[i] = (y_edges[i] + y_edges[i + 1] - 1) / 2.0
        for j in range(gw):
            tile = chan[y_edges[i]:y_edges[i + 1], x_edges[j]:x_edges[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=256)
            maps[i, j] = _clipped_equalization_map(hist, clip_limit)
    for j in range(gw):
        centers_x[j] = (x_edges[j] + x_edges[j + 1] - 1) / 2.0

    # Fractional tile coordinates per pixel; np.interp clamps at the border
    # tiles so edge pixels use the nearest mapping alone.
    ty = np.interp(np.arange(h), centers_y, np.arange(gh)) if gh > 1 else np.zeros(h)
    tx = np.interp(np.arange(w), centers_x, np.arange(gw)) if gw > 1 else np.zeros(w)
    i0 = np.floor(ty).astype(int)
    j0 = np.floor(tx).astype(int)
    i1 = np.minimum(i0 + 1, gh - 1)
    j1 = np.minimum(j0 + 1, gw - 1)
    wy = (ty - i0)[:, None]
    wx = (tx - j0)[None, :]

    ii0 = i0[:, None]
    ii1 = i1[:, None]
    jj0 = j0[None, :]
    jj1 = j1[None, :]
    v = chan
    out = ((1 - wy) * (1 - wx) * maps[ii0, jj0, v]
           + (1 - wy) * wx * maps[ii0, jj1, v]
           + wy * (1 - wx) * maps[ii1, jj0, v]
           + wy * wx * maps[ii1, jj1, v])
    return _to_uint8(out)


def _rgb_to_ycc(f: np.ndarray):
    y = 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]
    cb = f[..., 2] - y
    cr = f[..., 0] - y
    return y, cb, cr


def _ycc_to_rgb(y, cb, cr):
    r = y + cr
    b = y + cb
    g = (y - 0.299 * r - 0.114 * b) / 0.587
    return np.stack([r, g, b], axis=-1)


def clahe(img: np.ndarray, tile_grid=(8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    The image is split into a tile grid; each tile gets a clipped-histogram
    equalization lookup and per-pixel results interpolate bilinearly between
    neighboring tile lookups. Color images are equalized on the luminance
    channel only. A single tile with clip_limit >= 256 degenerates to plain
    global histogram equalization.
    """
    img = _check_image(img)
    gh, gw = int(tile_grid[0]), int(tile_grid[1])
    if gh < 1 or gw < 1:
        raise InvalidParameterError("tile grid dims must be >= 1")
    if clip_limit <= 0:
        raise InvalidParameterError("clip limit must be positive")
    if img.shape[0] < gh or img.shape[1] < gw:
        raise InvalidParameterError(
            f"image {img.shape[:2]} smaller than tile grid {(gh, gw)}")
    if img.ndim == 2:
        return _clahe_channel(img, (gh, gw), clip_limit)
    f = img.astype(np.float64)
    y, cb, cr = _rgb_to_ycc(f)
    y_eq = _clahe_channel(_to_uint8(y), (gh, gw), clip_limit).astype(np.float64)
    return _to_uint8(_ycc_to_rgb(y_eq, cb, cr))


def all_channel_clahe(img: np.ndarray, tile_grid=(8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """CLAHE applied to each channel independently."""
    img = _check_image(img)
    if img.ndim == 2:
        return clahe(img, tile_grid, clip_limit)
    out = np.empty_like(img)
    for c in range(3):
        out[..., c] = _clahe_channel(img[..., c], tile_grid, clip_limit)
    return out


def gamma_contrast(img: np.ndarray, gamma: float) -> np.ndarray:
    """Power-law contrast: out = 255 * (v / 255) ** gamma."""
    img = _check_image(img)
    if gamma <= 0:
        raise InvalidParameterError("gamma must be positive")
    return _to_uint8(255.0 * (img.astype(np.float64) / 255.0) ** gamma)


def sobel_gradients(img: np.ndarray):
    """Sobel gx, gy (float64) on the luminance channel, replicated borders."""
    lum = luminance(img)
    p = np.pad(lum, 1, mode="edge")
    gx = ((p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:])
          - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2]))
    gy = ((p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:])
          - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:]))
    return gx, gy


def _blend_edges(img: np.ndarray, response: np.ndarray, alpha: float) -> np.ndarray:
    edge = np.clip(response / 4.0, 0, 255)
    if img.ndim == 3:
        edge = edge[..., None]
    return _to_uint8((1.0 - alpha) * img.astype(np.float64) + alpha * edge)


def edge_detect(img: np.ndarray, alpha: float) -> np.ndarray:
    """Blend the Sobel gradient-magnitude image with the original by alpha."""
    img = _check_image(img)
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParameterError("alpha must be in [0, 1]")
    if alpha == 0.0:
        return img.copy()
    gx, gy = sobel_gradients(img)
    return _blend_edges(img, np.hypot(gx, gy), alpha)


def directed_edge_detect(img: np.ndarray, alpha: float, angle_deg: float) -> np.ndarray:
    """Blend the directional Sobel response |gx cos + gy sin| by alpha."""
    img = _check_image(img)
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParameterError("alpha must be in [0, 1]")
    if alpha == 0.0:
        return img.copy()
    gx, gy = sobel_gradients(img)
    theta = np.deg2rad(angle_deg)
    return _blend_edges(img, np.abs(gx * np.cos(theta) + gy * np.sin(theta)), alpha)


def canny(img: np.ndarray, low_thr: float = 50.0, high_thr: float = 150.0) -> np.ndarray:
    """Binary edge map: Sobel gradients, non-max suppression along the
    quantized gradient direction, then double-threshold hysteresis."""
    img = _check_image(img)
    if not 0 <= low_thr < high_thr:
        raise InvalidParameterError("need 0 <= low_thr < high_thr")
    gx, gy = sobel_gradients(img)
    mag = np.hypot(gx, gy) / 4.0

    angle = np.mod(np.rad2deg(np.arctan2(gy, gx)), 180.0)
    sector = ((angle + 22.5) // 45).astype(int) % 4  # 0:E-W 1:NE-SW 2:N-S 3:NW-SE
    p = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    neighbors = {
        0: (p[1:-1, 2:], p[1:-1, :-2]),
        1: (p[2:, 2:], p[:-2, :-2]),
        2: (p[2:, 1:-1], p[:-2, 1:-1]),
        3: (p[2:, :-2], p[:-2, 2:]),
    }
    keep = np.zeros((h, w), dtype=bool)
    for s, (n1, n2) in neighbors.items():
        sel = sector == s
        keep |= sel & (mag >= n1) & (mag >= n2)
    nms = np.where(keep, mag, 0.0)

    weak = nms >= low_thr
    strong = nms >= high_thr
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n:
        strong_labels = np.unique(labels[strong])
        strong_labels = strong_labels[strong_labels != 0]
        edges = np.isin(labels, strong_labels)
    else:
        edges = np.zeros_like(weak)
    out = np.where(edges, 255, 0).astype(np.uint8)
    if img.ndim == 3:
        out = np.repeat(out[..., None], 3, axis=2)
    return out


def channel_shuffle(img: np.ndarray, perm) -> np.ndarray:
    """Permute RGB channels. Grayscale input is a no-op with a warning."""
    img = _check_image(img)
    if img.ndim == 2:
        warnings.warn("channel_shuffle on grayscale image is a no-op")
        return img.copy()
    if sorted(perm) != [0, 1, 2]:
        raise InvalidParameterError(f"not a channel permutation: {perm}")
    return img[..., list(perm)].copy()


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luminance image; RGB input keeps 3 (equal) channels."""
    img = _check_image(img)
    if img.ndim == 2:
        return img.copy()
    gray = _to_uint8(luminance(img))
    return np.repeat(gray[..., None], 3, axis=2)


def _rgb_to_hsv(f: np.ndarray) -> np.ndarray:
    r, g, b = f[..., 0], f[..., 1], f[..., 2]
    maxc = np.max(f, axis=-1)
    minc = np.min(f, axis=-1)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    dz = np.where(delta > 0, delta, 1)
    h = np.zeros_like(maxc)
    h = np.where(maxc == r, ((g - b) / dz) % 6, h)
    h = np.where(maxc == g, (b - r) / dz + 2, h)
    h = np.where(maxc == b, (r - g) / dz + 4, h)
    h = np.where(delta > 0, h / 6.0, 0.0)
    return np.stack([h, s, maxc], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def hue_saturation(img: np.ndarray, hue_shift_deg: float, sat_shift: float) -> np.ndarray:
    """Rotate hue by hue_shift_deg and add sat_shift to saturation."""
    img = _check_image(img)
    if img.ndim == 2:
        return img.copy()
    hsv = _rgb_to_hsv(img.astype(np.float64) / 255.0)
    hsv[..., 0] = (hsv[..., 0] + hue_shift_deg / 360.0) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] + sat_shift, 0.0, 1.0)
    return _to_uint8(_hsv_to_rgb(hsv) * 255.0)


def color_quantize(img: np.ndarray, n_colors: int = 16) -> np.ndarray:
    """Reduce the palette to at most n_colors (median cut for RGB)."""
    from PIL import Image

    img = _check_image(img)
    if n_colors < 2:
        raise InvalidParameterError("n_colors must be >= 2")
    if img.ndim == 2:
        step = 256 // n_colors
        return ((img // step) * step + step // 2).astype(np.uint8)
    pil = Image.fromarray(img, mode="RGB")
    return np.asarray(pil.quantize(colors=n_colors).convert("RGB"))


def contrast_brightness(img: np.ndarray, contrast: float, brightness: float) -> np.ndarray:
    """Linear contrast about mid-gray plus a brightness offset."""
    img = _check_image(img)
    if contrast < 0:
        raise InvalidParameterError("contrast factor must be >= 0")
    f = contrast * (img.astype(np.float64) - 127.5) + 127.5 + brightness
    return _to_uint8(f)


def brightness_multiply(img: np.ndarray, factor: float) -> np.ndarray:
    """Multiply all values by factor (factor 1.0 is exact identity)."""
    img = _check_image(img)
    if factor < 0:
        raise InvalidParameterError("brightness factor must be >= 0")
    if factor == 1.0:
        return img.copy()
    return _to_uint8(img.astype(np.float64) * factor)


def channel_shift(img: np.ndarray, offsets) -> np.ndarray:
    """Add a per-channel offset, clipping to [0, 255]."""
    img = _check_image(img)
    if img.ndim == 2:
        return _to_uint8(img.astype(np.float64) + float(offsets[0]))
    off = np.asarray(offsets, dtype=np.float64).reshape(1, 1, 3)
    return _to_uint8(img.astype(np.float64) + off)
