"""Array-level kernels behind the differentiable primitives.

These functions operate on plain numpy arrays; :mod:`mbgm.autodiff` wraps them
into graph nodes.  The transposed convolution is expressed as one GEMM against
the full kernel followed by strided scatter-adds of the k*k tap planes, which
keeps the arithmetic inside BLAS instead of Python loops.  Accumulation order
is fixed (taps in row-major order), so results are run-to-run deterministic.

Layouts: activations are channel-last ``(N, H, W, C)``, kernels are
``(kh, kw, Cin, Cout)``.  ``crop`` is the per-side padding of the transposed
convolution as ``(top, bottom, left, right)``; asymmetric values support the
size-preserving layer (kernel 4, stride 1, crop ``(1, 2, 1, 2)``).
"""

from __future__ import annotations

import numpy as np


def conv_transpose2d_out_shape(in_shape, kernel_shape, stride, crop):
    """Spatial output shape ``(Ho, Wo)`` of a transposed convolution."""
    hi, wi = in_shape
    kh, kw = kernel_shape
    top, bottom, left, right = crop
    ho = (hi - 1) * stride + kh - top - bottom
    wo = (wi - 1) * stride + kw - left - right
    return ho, wo


def normalize_crop(padding) -> tuple[int, int, int, int]:
    """Accept an int (symmetric padding) or a 4-tuple of per-side crops."""
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        return (p, p, p, p)
    top, bottom, left, right = (int(v) for v in padding)
    return (top, bottom, left, right)


def conv_transpose2d_fwd(x, w, stride, crop, bias=None):
    """Transposed 2-D convolution (scatter-accumulate semantics).

    ``out_full[:, s*i+dy, s*j+dx, :] += x[:, i, j, :] @ w[dy, dx]`` for every
    tap ``(dy, dx)``, then the crop margins are removed and ``bias`` added.
    """
    n, hi, wi, ci = x.shape
    kh, kw, _, co = w.shape
    top, bottom, left, right = crop
    hf = (hi - 1) * stride + kh
    wf = (wi - 1) * stride + kw

    cols = x.reshape(n * hi * wi, ci) @ w.transpose(2, 0, 1, 3).reshape(ci, kh * kw * co)
    cols = cols.reshape(n, hi, wi, kh, kw, co)

    full = np.zeros((n, hf, wf, co), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            full[:, dy:dy + stride * hi:stride, dx:dx + stride * wi:stride, :] += cols[:, :, :, dy, dx, :]

    out = np.ascontiguousarray(full[:, top:hf - bottom, left:wf - right, :])
    if bias is not None:
        out += bias
    return out


def _gather_taps(g, x_spatial, kernel_spatial, stride, crop):
    """Collect, for every tap, the output-gradient plane each input saw."""
    n = g.shape[0]
    co = g.shape[3]
    hi, wi = x_spatial
    kh, kw = kernel_spatial
    top, bottom, left, right = crop
    hf = (hi - 1) * stride + kh
    wf = (wi - 1) * stride + kw
    g_full = np.zeros((n, hf, wf, co), dtype=g.dtype)
    g_full[:, top:hf - bottom, left:wf - right, :] = g
    taps = np.empty((n, hi, wi, kh, kw, co), dtype=g.dtype)
    for dy in range(kh):
        for dx in range(kw):
            taps[:, :, :, dy, dx, :] = g_full[:, dy:dy + stride * hi:stride, dx:dx + stride * wi:stride, :]
    return taps


def conv_transpose2d_bwd(g, x, w, stride, crop, need_input=True, need_kernel=True):
    """Gradients of :func:`conv_transpose2d_fwd` w.r.t. input and kernel."""
    n, hi, wi, ci = x.shape
    kh, kw, _, co = w.shape
    taps = _gather_taps(g, (hi, wi), (kh, kw), stride, crop)
    taps2d = taps.reshape(n * hi * wi, kh * kw * co)

    dx = dw = None
    if need_input:
        dx = taps2d @ w.transpose(0, 1, 3, 2).reshape(kh * kw * co, ci)
        dx = dx.reshape(n, hi, wi, ci)
    if need_kernel:
        dw = x.reshape(n * hi * wi, ci).T @ taps2d
        dw = dw.reshape(ci, kh, kw, co).transpose(1, 2, 0, 3)
    return dx, dw


def conv_transpose2d_bwd_bias(g):
    return g.sum(axis=(0, 1, 2))


def bilinear_fwd(image, coords):
    """Sample ``image`` at continuous ``coords`` with border clamp.

    ``image`` is ``(H, W, C)``; ``coords`` is ``(Ho, Wo, 2)`` carrying
    ``(x, y)`` pixel positions.  Coordinates are clamped to the image
    rectangle before interpolation.  Returns ``(out, cache)`` where ``cache``
    feeds :func:`bilinear_bwd`.
    """
    h, w, _ = image.shape
    cx = np.clip(coords[..., 0], 0.0, w - 1.0)
    cy = np.clip(coords[..., 1], 0.0, h - 1.0)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    np.minimum(x0, max(w - 2, 0), out=x0)
    np.minimum(y0, max(h - 2, 0), out=y0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (cx - x0).astype(image.dtype)
    fy = (cy - y0).astype(image.dtype)

    v00 = image[y0, x0]
    v10 = image[y0, x1]
    v01 = image[y1, x0]
    v11 = image[y1, x1]

    fx_ = fx[..., None]
    fy_ = fy[..., None]
    top = v00 + fx_ * (v10 - v00)
    bot = v01 + fx_ * (v11 - v01)
    out = top + fy_ * (bot - top)

    # clamped coordinates get zero coordinate-gradient (true subgradient)
    inx = ((coords[..., 0] >= 0.0) & (coords[..., 0] <= w - 1.0)).astype(image.dtype)
    iny = ((coords[..., 1] >= 0.0) & (coords[..., 1] <= h - 1.0)).astype(image.dtype)
    cache = (image.shape, x0, x1, y0, y1, fx, fy, v00, v10, v01, v11, inx, iny)
    return out, cache


def bilinear_bwd(g, cache, need_image=True, need_coords=True):
    """Gradients of :func:`bilinear_fwd` w.r.t. image values and coords."""
    (h, w, c), x0, x1, y0, y1, fx, fy, v00, v10, v01, v11, inx, iny = cache
    fx_ = fx[..., None]
    fy_ = fy[..., None]

    dimage = None
    if need_image:
        w00 = (1.0 - fx_) * (1.0 - fy_) * g
        w10 = fx_ * (1.0 - fy_) * g
        w01 = (1.0 - fx_) * fy_ * g
        w11 = fx_ * fy_ * g
        dimage = np.zeros(h * w * c, dtype=g.dtype)
        chan = np.arange(c, dtype=np.int64)
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w10), (y1, x0, w01), (y1, x1, w11)):
            flat = ((yy * w + xx)[..., None] * c + chan).ravel()
            dimage += np.bincount(flat, weights=ww.ravel().astype(np.float64), minlength=h * w * c).astype(g.dtype)
        dimage = dimage.reshape(h, w, c)

    dcoords = None
    if need_coords:
        dout_dx = ((1.0 - fy_) * (v10 - v00) + fy_ * (v11 - v01)) * g
        dout_dy = ((1.0 - fx_) * (v01 - v00) + fx_ * (v11 - v10)) * g
        dcoords = np.empty(fx.shape + (2,), dtype=g.dtype)
        dcoords[..., 0] = dout_dx.sum(axis=-1) * inx
        dcoords[..., 1] = dout_dy.sum(axis=-1) * iny
    return dimage, dcoords


def sample_grid(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Identity sampling grid: ``grid[y, x] = (x, y)``."""
    grid = np.empty((h, w, 2), dtype=dtype)
    grid[..., 0] = np.arange(w, dtype=dtype)[None, :]
    grid[..., 1] = np.arange(h, dtype=dtype)[:, None]
    return grid
