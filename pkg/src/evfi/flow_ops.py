"""Differentiable warping, flow resampling, correlation and the photometric losses.

Tensors are NCHW; single C x H x W inputs are accepted and returned unbatched.
Flow channel 0 is the horizontal displacement in pixels, channel 1 the vertical.
"""
from __future__ import annotations

import numpy as np

from evfi import tensor as T
from evfi.tensor import Tensor, make_op

CHARBONNIER_EPS = 1e-3
CHARBONNIER_ALPHA = 0.5
SMOOTH_BETA = 10.0
CORR_RADIUS = 3


def _batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return x.reshape(x.shape[1:]) if squeeze else x


def backward_warp(source: Tensor, flow: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinear backward warp with zero fill outside the image.

    Returns ``(warped, validity)``.  ``validity`` is the in-bounds share of the
    bilinear footprint: 1 where the sample lies inside the image, 0 where it
    lies fully outside.  It carries no gradient.
    """
    source, squeeze = _batch(T.as_tensor(source))
    flow, _ = _batch(T.as_tensor(flow))
    n, c, h, w = source.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError(f"flow shape {flow.shape} does not match source {source.shape}")

    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = gx[None] + flow.data[:, 0]
    sy = gy[None] + flow.data[:, 1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    hw = h * w
    src = source.data.reshape(n, c, hw)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)).reshape(n, hw)
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        # d(weight)/dx and d(weight)/dy for this corner
        dwx = (1.0 if dx else -1.0) * wy
        dwy = (1.0 if dy else -1.0) * wx
        m = inside.astype(np.float64)
        corners.append((idx, (wx * wy * m).reshape(n, 1, hw), (dwx * m).reshape(n, 1, hw),
                        (dwy * m).reshape(n, 1, hw)))

    vals = [np.take_along_axis(src, idx[:, None, :].repeat(c, axis=1), axis=2) for idx, *_ in corners]
    out = sum(v * wgt for v, (_, wgt, _, _) in zip(vals, corners))
    validity = sum(wgt for _, wgt, _, _ in corners).reshape(n, 1, h, w)

    def bw(g):
        g = g.reshape(n, c, hw)
        gsrc = np.zeros(n * c * hw)
        base = (np.arange(n * c) * hw).reshape(n, c, 1)
        gflow = np.zeros((n, 2, hw))
        for v, (idx, wgt, dwx, dwy) in zip(vals, corners):
            flat = (base + idx[:, None, :]).reshape(-1)
            gsrc += np.bincount(flat, weights=(g * wgt).reshape(-1), minlength=gsrc.size)
            gv = (g * v).sum(axis=1)
            gflow[:, 0] += gv * dwx[:, 0]
            gflow[:, 1] += gv * dwy[:, 0]
        return gsrc.reshape(n, c, h, w), gflow.reshape(n, 2, h, w)

    warped = make_op(out.reshape(n, c, h, w), (source, flow), bw)
    validity = Tensor(validity)
    return _unbatch(warped, squeeze), _unbatch(validity, squeeze)


def resize_flow(flow: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a flow field to ``out_h`` x ``out_w`` and scale displacements to match."""
    flow, squeeze = _batch(T.as_tensor(flow))
    h, w = flow.shape[-2:]
    if (out_h, out_w) == (h, w):
        return _unbatch(flow, squeeze)
    resized = T.bilinear_resize(flow, out_h, out_w)
    scale = np.array([out_w / w, out_h / h]).reshape(1, 2, 1, 1)
    return _unbatch(resized * scale, squeeze)


def rescale_flow(flow: Tensor, factor: float) -> Tensor:
    if factor <= 0:
        raise ValueError(f"rescale factor must be positive, got {factor}")
    h, w = flow.shape[-2:]
    out_h, out_w = int(round(h * factor)), int(round(w * factor))
    if out_h < 1 or out_w < 1:
        raise ValueError(f"factor {factor} collapses a {h}x{w} field")
    if factor == 1:
        return flow
    resized = T.bilinear_resize(flow, out_h, out_w)
    return resized * float(factor)


def blend_flows(v_img: Tensor, v_evt: Tensor, mask: Tensor) -> Tensor:
    """``mask * v_img + (1 - mask) * v_evt`` per pixel."""
    if v_img.shape != v_evt.shape:
        raise ValueError(f"flow shapes differ: {v_img.shape} vs {v_evt.shape}")
    if mask.shape[-2:] != v_img.shape[-2:] or mask.shape[-3] != 1:
        raise ValueError(f"mask shape {mask.shape} incompatible with flow {v_img.shape}")
    return mask * v_img + (1.0 - mask) * v_evt


def l2_normalize_channels(x: Tensor, eps: float = 1e-6) -> Tensor:
    norm = T.norm(x, axis=1, keepdims=True)
    return x / (norm + eps)


def _correlate(a: Tensor, b: Tensor, radius: int) -> Tensor:
    n, c, h, w = a.shape
    d = 2 * radius + 1
    bp = np.pad(b.data, ((0, 0), (0, 0), (radius, radius), (radius, radius)))
    out = np.empty((n, d * d, h, w))
    for k in range(d * d):
        i, j = divmod(k, d)
        out[:, k] = (a.data * bp[:, :, i:i + h, j:j + w]).sum(axis=1)

    def bw(g):
        ga = np.zeros(a.shape)
        gbp = np.zeros(bp.shape)
        for k in range(d * d):
            i, j = divmod(k, d)
            gk = g[:, k:k + 1]
            ga += gk * bp[:, :, i:i + h, j:j + w]
            gbp[:, :, i:i + h, j:j + w] += gk * a.data
        gb = gbp[:, :, radius:radius + h, radius:radius + w] if radius else gbp
        return ga, gb

    return make_op(out, (a, b), bw)


def local_correlation(feat_a: Tensor, feat_b: Tensor, radius: int = CORR_RADIUS,
                      normalize: bool = True) -> Tensor:
    """Cost volume of shape ((2r+1)^2, H, W); channel ``(dy+r)*(2r+1) + (dx+r)``."""
    if feat_a.shape != feat_b.shape:
        raise ValueError(f"feature shapes differ: {feat_a.shape} vs {feat_b.shape}")
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    a, squeeze = _batch(T.as_tensor(feat_a))
    b, _ = _batch(T.as_tensor(feat_b))
    if normalize:
        a = l2_normalize_channels(a)
        b = l2_normalize_channels(b)
    return _unbatch(_correlate(a, b, radius), squeeze)


def charbonnier(residual: Tensor, eps: float = CHARBONNIER_EPS, alpha: float = CHARBONNIER_ALPHA) -> Tensor:
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    residual = T.as_tensor(residual)
    return ((residual * residual + eps * eps) ** alpha).mean()


def edge_aware_smoothness(flow: Tensor, image: Tensor, beta: float = SMOOTH_BETA) -> Tensor:
    """First-order smoothness weighted by ``exp(-beta * mean_c |image gradient|)``."""
    flow, _ = _batch(T.as_tensor(flow))
    image, _ = _batch(T.as_tensor(image))
    if flow.shape[-2:] != image.shape[-2:] or flow.shape[0] != image.shape[0]:
        raise ValueError(f"flow {flow.shape} and image {image.shape} geometry differ")
    img = image.data
    wx = np.exp(-beta * np.abs(img[..., :, 1:] - img[..., :, :-1]).mean(axis=1, keepdims=True))
    wy = np.exp(-beta * np.abs(img[..., 1:, :] - img[..., :-1, :]).mean(axis=1, keepdims=True))
    dx = T.tabs(flow[..., :, 1:] - flow[..., :, :-1]) * wx
    dy = T.tabs(flow[..., 1:, :] - flow[..., :-1, :]) * wy
    return dx.mean() + dy.mean()


def flow_loss(gt: Tensor, i0: Tensor, i1: Tensor, v_t0: Tensor, v_t1: Tensor,
              lambda_photo: float = 1.0, lambda_smooth: float = 10.0) -> Tensor:
    """Photometric loss of both backward-warped key frames plus edge-aware smoothness."""
    w0, _ = backward_warp(i0, v_t0)
    w1, _ = backward_warp(i1, v_t1)
    photo = charbonnier(gt - w0) + charbonnier(gt - w1)
    smooth = edge_aware_smoothness(v_t0, gt) + edge_aware_smoothness(v_t1, gt)
    return photo * lambda_photo + smooth * lambda_smooth


def area_downscale(x: Tensor, factor: int) -> Tensor:
    x, squeeze = _batch(T.as_tensor(x))
    return _unbatch(T.avg_pool2d(x, factor), squeeze)


def mirror_flow(flow: np.ndarray) -> np.ndarray:
    """Flip a flow field horizontally (negates the horizontal component)."""
    out = np.array(flow[..., ::-1], dtype=np.float64)
    out[..., 0, :, :] *= -1.0
    return out


def endpoint_error(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    return float(np.sqrt(((pred - gt) ** 2).sum(axis=-3)).mean())
