"""Image I/O, bicubic resampling and the Y-channel PSNR/SSIM protocol.

Images are numpy arrays of shape (C, H, W) holding reals in [0, 1]
(planar layout). PNG files are 8-bit, channel-interleaved on disk.

The resampler and metrics follow the conventions of the MATLAB tooling
commonly used for super-resolution benchmarks: ``imresize`` bicubic with
antialiasing on downscale and symmetric edge extension, BT.601 studio-swing
luma, and Wang et al.'s SSIM with an 11x11 Gaussian window and 'valid'
filtering.
"""

from __future__ import annotations

import math
from functools import lru_cache
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

PathLike = Union[str, Path]


class ImageIOError(IOError):
    pass


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], scale to 255 and round half away from zero."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, as storing the image as PNG would."""
    return to_uint8(img).astype(np.float64) / 255.0


def png_read(path: PathLike) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG as a (C, H, W) float64 array in [0, 1].

    Alpha is dropped and palette images are expanded to RGB.
    """
    path = Path(path)
    try:
        depth = _png_bit_depth(path)
        if depth is not None and depth > 8:
            raise ImageIOError(f"{path}: unsupported bit depth {depth}; only 8-bit PNG is accepted")
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise ImageIOError(f"{path}: unsupported pixel mode {mode}; only 8-bit PNG is accepted")
            if mode in ("1", "L"):
                arr = np.asarray(im.convert("L"))[None]
            elif mode == "LA":
                arr = np.asarray(im)[..., 0][None]
            else:
                arr = np.asarray(im.convert("RGB")).transpose(2, 0, 1)
    except ImageIOError:
        raise
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"{path}: cannot read image ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def _png_bit_depth(path: Path):
    """Bit depth from the IHDR chunk, or None for non-PNG files."""
    with open(path, "rb") as fh:
        head = fh.read(25)
    if len(head) < 25 or head[:8] != b"\x89PNG\r\n\x1a\n":
        return None
    return head[24]


def png_write(path: PathLike, img: np.ndarray) -> None:
    """Write a (C, H, W) image with C in {1, 3} as an 8-bit PNG."""
    path = Path(path)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got {img.shape}")
    data = to_uint8(img)
    pil = Image.fromarray(data[0], mode="L") if data.shape[0] == 1 else Image.fromarray(data.transpose(1, 2, 0), mode="RGB")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        # fixed settings keep the written bytes reproducible
        pil.save(path, format="PNG", optimize=False, compress_level=6)
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write image ({exc})") from exc


def read_manifest(path: PathLike) -> List[Path]:
    """One image path per line; blank lines and ``#`` comments are ignored.

    Relative entries are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot read manifest ({exc})") from exc
    out = []
    for line in lines:
        entry = line.split("#", 1)[0].strip()
        if not entry:
            continue
        p = Path(entry)
        out.append(p if p.is_absolute() else path.parent / p)
    return out


def write_manifest(path: PathLike, entries) -> None:
    Path(path).write_text("".join(f"{e}\n" for e in entries))


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax <= 2, far, 0.0))


@lru_cache(maxsize=256)
def resize_matrix(in_len: int, out_len: int, scale: float, antialias: bool = True, edge: str = "symmetric") -> np.ndarray:
    """Dense (out_len, in_len) matrix applying 1-D bicubic resampling.

    Output pixel ``x`` (1-based) sits at input coordinate
    ``x / scale + 0.5 * (1 - 1 / scale)``. When downscaling with
    ``antialias`` the kernel is stretched by ``1 / scale``. Taps falling
    outside the signal are mirrored (``edge="symmetric"``) or clamped
    (``edge="clamp"``).
    """
    if in_len < 1 or out_len < 1:
        raise ValueError("resize extents must be positive")
    width = 4.0
    if scale < 1 and antialias:
        kernel = lambda t: scale * cubic(scale * t)  # noqa: E731
        width = width / scale
    else:
        kernel = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w = w / w.sum(axis=1, keepdims=True)
    idx = idx.astype(np.int64) - 1  # to 0-based
    if edge == "symmetric":
        period = 2 * in_len
        m = np.mod(idx, period)
        idx = np.where(m < in_len, m, period - 1 - m)
    elif edge == "clamp":
        idx = np.clip(idx, 0, in_len - 1)
    else:
        raise ValueError(f"unknown edge mode {edge!r}")
    mat = np.zeros((out_len, in_len))
    np.add.at(mat, (np.repeat(np.arange(out_len), taps), idx.ravel()), w.ravel())
    mat.setflags(write=False)
    return mat


def bicubic_resize(
    img: np.ndarray,
    out_h: int,
    out_w: int,
    antialias: bool = True,
    edge: str = "symmetric",
    scale: Union[float, None] = None,
) -> np.ndarray:
    """Separable bicubic resize of a (C, H, W) image; no clamping of the result.

    ``scale`` overrides the per-axis ratio ``out / in`` (as when resizing by a
    factor rather than to a size). Axes are processed smallest scale first,
    rows first on ties.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    c, h, w = img.shape
    sh = scale if scale is not None else out_h / h
    sw = scale if scale is not None else out_w / w
    out = np.asarray(img, dtype=np.float64)

    def rows(a):
        return np.einsum("oh,chw->cow", resize_matrix(h, out_h, sh, antialias, edge), a)

    def cols(a):
        return np.einsum("ow,chw->cho", resize_matrix(w, out_w, sw, antialias, edge), a)

    if sw < sh:
        return rows(cols(out))
    return cols(rows(out))


def downscale(img: np.ndarray, r: int) -> np.ndarray:
    _, h, w = img.shape
    return bicubic_resize(img, h // r, w // r, scale=1.0 / r)


def upscale(img: np.ndarray, r: int) -> np.ndarray:
    _, h, w = img.shape
    return bicubic_resize(img, h * r, w * r, scale=float(r))


def modcrop(img: np.ndarray, r: int) -> np.ndarray:
    """Trim bottom/right so both extents are multiples of ``r``."""
    _, h, w = img.shape
    return img[:, : h - h % r, : w - w % r]


def degrade(hr: np.ndarray, r: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(hr, lr, ilr)``: HR cropped to multiples of r, its 8-bit x1/r
    bicubic reduction, and the 8-bit bicubic x r interpolation of that."""
    hr = modcrop(hr, r)
    lr = quantize(downscale(hr, r))
    ilr = quantize(upscale(lr, r))
    return hr, lr, ilr


# ---------------------------------------------------------------------------
# colour and metrics
# ---------------------------------------------------------------------------

_Y_COEFFS = np.array([65.481, 128.553, 24.966])


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma in [16/255, 235/255]; 1-channel input passes through."""
    if img.shape[0] == 1:
        return img
    if img.shape[0] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {img.shape[0]}")
    y = np.tensordot(_Y_COEFFS, img, axes=(0, 0)) + 16.0
    return (y / 255.0)[None]


def crop_border(img: np.ndarray, n: int) -> np.ndarray:
    _, h, w = img.shape
    if n < 0 or 2 * n >= min(h, w):
        raise ValueError(f"cannot crop {n} pixels from each side of a {h}x{w} image")
    if n == 0:
        return img
    return img[:, n:-n, n:-n]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for data scaled to [0, 1]; identical inputs give ``math.inf``."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    t = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(t, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM of two single-channel images (11x11 Gaussian, sigma 1.5, valid region)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValueError("ssim expects a single channel")
        a, b = a[0], b[0]
    if min(a.shape) < 11:
        raise ValueError(f"ssim needs extents >= 11, got {a.shape}")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    g = gaussian_window()
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu1, mu2 = _filter_valid(a, g), _filter_valid(b, g)
    mu11, mu22, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s11 = _filter_valid(a * a, g) - mu11
    s22 = _filter_valid(b * b, g) - mu22
    s12 = _filter_valid(a * b, g) - mu12
    num = (2 * mu12 + c1) * (2 * s12 + c2)
    den = (mu11 + mu22 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def y_metrics(pred: np.ndarray, gt: np.ndarray, border: int) -> Tuple[float, float]:
    """PSNR/SSIM on the luma channel after removing ``border`` pixels per side.

    The prediction is clamped and stored at 8 bits, and luma is rounded to
    8 bits, mirroring an evaluation on uint8 images.
    """
    y_pred = quantize(rgb_to_y(quantize(pred)))
    y_gt = quantize(rgb_to_y(quantize(gt)))
    y_pred = crop_border(y_pred, border)
    y_gt = crop_border(y_gt, border)
    return psnr(y_pred, y_gt), ssim(y_pred, y_gt)
