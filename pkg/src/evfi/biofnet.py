"""Cascaded event + frame bidirectional inter-frame flow estimator.

Per pyramid level ``s`` (0 = coarsest) the cascade runs anchor-feature
synthesis, event-only residual flow (E-BiOF), confidence-mask fusion with the
upsampled image flow of the previous level (F-BiOF) and correlation-based
residual refinement (I-BiOF).  Both directions ``t->0`` and ``t->1`` share
weights; they are stacked along the batch axis and run together.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from evfi import flow_ops as F
from evfi import tensor as T
from evfi.nn import ChannelSymmetry as Sym
from evfi.nn import Conv2d, ConvBlock, Module
from evfi.tensor import Tensor

SCALES = (0, 1, 2)


@dataclass
class PyramidConfig:
    base_channels: int = 16
    in_channels: int = 3
    bins: int = 16
    corr_radius: int = 3
    image_flow_downsample: dict = field(default_factory=lambda: {0: 8, 1: 4, 2: 2})
    event_flow_scale_multiplier: int = 2
    stages: tuple = ("E", "F", "I")
    seed: int = 0

    def channels(self, s: int) -> int:
        # doubles per coarser level; finest level carries base_channels
        return self.base_channels * 2 ** (SCALES[-1] - s)

    def image_size(self, s: int, h: int, w: int) -> tuple[int, int]:
        f = self.image_flow_downsample[s]
        return h // f, w // f

    def check_geometry(self, h: int, w: int) -> None:
        f = max(self.image_flow_downsample.values())
        if h % f or w % f:
            raise ValueError(f"input {h}x{w} is not divisible by the largest downsample factor {f}")


@dataclass
class PyramidFeatures:
    c0: list
    c1: list
    flow_t0: list
    flow_t1: list
    syn_left: list
    syn_right: list


@dataclass
class FlowPyramids:
    """Per-level flows at image-flow resolution plus diagnostics."""

    t0: list
    t1: list
    event_t0: list = field(default_factory=list)
    event_t1: list = field(default_factory=list)
    fused_t0: list = field(default_factory=list)
    fused_t1: list = field(default_factory=list)
    mask_t0: list = field(default_factory=list)
    mask_t1: list = field(default_factory=list)

    def final(self) -> tuple[Tensor, Tensor]:
        return self.t0[-1], self.t1[-1]


class Encoder(Module):
    """Strided-conv feature pyramid.

    ``first_scale_factor`` is the downsampling of the finest output level
    (2 for image-flow-resolution features, 1 for event-flow features).
    """

    def __init__(self, rng, cin: int, cfg: PyramidConfig, first_scale_factor: int):
        c2, c1, c0 = (cfg.channels(s) for s in (2, 1, 0))
        self.first_down = first_scale_factor == 2
        self.stem = Conv2d(rng, cin, c2, 3)
        self.down2 = Conv2d(rng, c2, c2, 4, stride=2, padding=1) if self.first_down else None
        self.conv2 = Conv2d(rng, c2, c2, 3)
        self.down1 = Conv2d(rng, c2, c1, 4, stride=2, padding=1)
        self.conv1 = Conv2d(rng, c1, c1, 3)
        self.down0 = Conv2d(rng, c1, c0, 4, stride=2, padding=1)
        self.conv0 = Conv2d(rng, c0, c0, 3)

    def __call__(self, x: Tensor) -> list:
        act = T.leaky_relu
        x = act(self.stem(x))
        if self.down2 is not None:
            x = act(self.down2(x))
        f2 = act(self.conv2(x))
        f1 = act(self.conv1(act(self.down1(f2))))
        f0 = act(self.conv0(act(self.down0(f1))))
        return [f0, f1, f2]


class AnchorBlock(Module):
    """Synthesizes the latent intermediate-frame feature at one level."""

    def __init__(self, rng, c: int):
        self.c = c
        self.block = ConvBlock(rng, 6 * c, c, c)

    def __call__(self, c0, c1, fe_left, fe_right, prev_up=None) -> Tensor:
        for name, t in (("C1", c1), ("left event", fe_left), ("right event", fe_right)):
            if t.shape != c0.shape:
                raise ValueError(f"{name} feature shape {t.shape} differs from C0 {c0.shape}")
        if prev_up is None:
            n, _, h, w = c0.shape
            prev_up = Tensor(np.zeros((n, 2 * self.c, h, w)))
        elif prev_up.shape[1] != 2 * self.c or prev_up.shape[2:] != c0.shape[2:]:
            raise ValueError(f"previous anchor shape {prev_up.shape} incompatible with level {c0.shape}")
        x = T.concat([c0, c1, fe_left, fe_right, prev_up], axis=1)
        return self.block(x) + (c0 + c1) * 0.5


class EventFlowDecoder(Module):
    """Residual event-only flow for both directions at event-flow resolution."""

    def __init__(self, rng, c: int):
        self.c = c
        self.block = ConvBlock(rng, 2 * c + 2, c, 2, zero_last=True,
                               in_sym=Sym.cat(Sym.scalar(2 * c), Sym.flow()), out_sym=Sym.flow())

    def __call__(self, fe_t0, fe_t1, prev=None):
        if fe_t0.shape != fe_t1.shape:
            raise ValueError(f"event feature shapes differ: {fe_t0.shape} vs {fe_t1.shape}")
        n, c, h, w = fe_t0.shape
        if c != self.c:
            raise ValueError(f"decoder expects {self.c} channels, got {c}")
        if prev is None:
            base = Tensor(np.zeros((2 * n, 2, h, w)))
        else:
            if prev[0].shape[-2:] != (h, w):
                raise ValueError(f"previous event flow {prev[0].shape} does not match features {fe_t0.shape}")
            base = T.concat(list(prev), axis=0)
        own = T.concat([fe_t0, fe_t1], axis=0)
        other = T.concat([fe_t1, fe_t0], axis=0)
        flow = base + self.block(T.concat([own, other, base], axis=1))
        return flow[:n], flow[n:]


class FusionBlock(Module):
    """Confidence-mask fusion of upsampled image flow and event flow."""

    def __init__(self, rng, c: int):
        self.refine_frame = ConvBlock(rng, c, c, c)
        self.refine_anchor = ConvBlock(rng, c, c, c)
        self.mask_head = ConvBlock(rng, 3 * c + 4, c, 1,
                                   in_sym=Sym.cat(Sym.scalar(3 * c), Sym.flow(), Sym.flow()))
        self.force_mask: float | None = None

    def __call__(self, v_img, v_evt, c_k, c_t):
        if v_img.shape != v_evt.shape or v_img.shape[-2:] != c_k.shape[-2:] or c_k.shape != c_t.shape:
            raise ValueError(f"geometry mismatch: flows {v_img.shape}/{v_evt.shape}, features {c_k.shape}/{c_t.shape}")
        ck = self.refine_frame(c_k)
        ct = self.refine_anchor(c_t)
        warp_e, _ = F.backward_warp(ck, v_evt)
        warp_i, _ = F.backward_warp(ck, v_img)
        logits = self.mask_head(T.concat([ct, warp_e, warp_i, v_img, v_evt], axis=1))
        mask = T.sigmoid(logits)
        if self.force_mask is not None:
            mask = Tensor(np.full(mask.shape, float(self.force_mask)))
        return F.blend_flows(v_img, v_evt, mask), mask


class RefineBlock(Module):
    """Warp, correlate against the anchor feature, predict a residual flow."""

    def __init__(self, rng, c: int, radius: int):
        self.radius = radius
        d2 = (2 * radius + 1) ** 2
        self.block = ConvBlock(rng, d2 + c + 2, c, 2, zero_last=True,
                               in_sym=Sym.cat(Sym.correlation(radius), Sym.scalar(c), Sym.flow()),
                               out_sym=Sym.flow())

    def __call__(self, v_f, c_k, c_t):
        if v_f.shape[-2:] != c_k.shape[-2:] or c_k.shape != c_t.shape:
            raise ValueError(f"geometry mismatch: flow {v_f.shape}, features {c_k.shape}/{c_t.shape}")
        warped, _ = F.backward_warp(c_k, v_f)
        corr = F.local_correlation(c_t, warped, self.radius, normalize=True)
        return v_f + self.block(T.concat([corr, c_t, v_f], axis=1))


class EIFBiOFNet(Module):
    def __init__(self, cfg: PyramidConfig | None = None):
        cfg = cfg or PyramidConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.frame_encoder = Encoder(rng, cfg.in_channels, cfg, 2)
        self.event_flow_encoder = Encoder(rng, cfg.bins, cfg, 1)
        self.event_syn_encoder = Encoder(rng, cfg.bins, cfg, 2)
        self.anchor = [AnchorBlock(rng, cfg.channels(s)) for s in SCALES]
        self.event_flow = [EventFlowDecoder(rng, cfg.channels(s)) for s in SCALES]
        self.fusion = [None] + [FusionBlock(rng, cfg.channels(s)) for s in SCALES[1:]]
        self.refine = [RefineBlock(rng, cfg.channels(s), cfg.corr_radius) for s in SCALES]

    def convs(self):
        return [m for m in self.modules() if isinstance(m, Conv2d)]

    def mirror_project(self) -> None:
        """Test hook: restrict every kernel so the network commutes with a horizontal flip."""
        for conv in self.convs():
            conv.mirror_project()

    # -- stages ----------------------------------------------------------
    def extract_pyramids(self, i0, i1, g_0t, g_t0, g_t1) -> PyramidFeatures:
        i0, i1, g_0t, g_t0, g_t1 = (_nchw(x) for x in (i0, i1, g_0t, g_t0, g_t1))
        n, _, h, w = i0.shape
        self.cfg.check_geometry(h, w)
        for name, g in (("G_0t", g_0t), ("G_t0", g_t0), ("G_t1", g_t1), ("I1", i1)):
            if g.shape[0] != n or g.shape[-2:] != (h, w):
                raise ValueError(f"{name} geometry {g.shape} differs from I0 {i0.shape}")
        frames = self.frame_encoder(T.concat([i0, i1], axis=0))
        flows = self.event_flow_encoder(T.concat([g_t0, g_t1], axis=0))
        syn = self.event_syn_encoder(T.concat([g_0t, g_t1], axis=0))
        return PyramidFeatures(
            c0=[f[:n] for f in frames], c1=[f[n:] for f in frames],
            flow_t0=[f[:n] for f in flows], flow_t1=[f[n:] for f in flows],
            syn_left=[f[:n] for f in syn], syn_right=[f[n:] for f in syn],
        )

    def forward_features(self, feats: PyramidFeatures) -> FlowPyramids:
        stages = self.cfg.stages
        out = FlowPyramids(t0=[], t1=[])
        anchor_prev = None
        event_prev = None
        image_prev = None
        n = feats.c0[0].shape[0]
        for s in SCALES:
            c0, c1 = feats.c0[s], feats.c1[s]
            h, w = c0.shape[-2:]
            prev_up = None if anchor_prev is None else T.bilinear_resize(anchor_prev, h, w)
            c_t = self.anchor[s](c0, c1, feats.syn_left[s], feats.syn_right[s], prev_up)
            anchor_prev = c_t

            eh, ew = feats.flow_t0[s].shape[-2:]
            prev_evt = None if event_prev is None else tuple(F.resize_flow(v, eh, ew) for v in event_prev)
            native = self.event_flow[s](feats.flow_t0[s], feats.flow_t1[s], prev_evt)
            event_prev = native
            v_evt = [F.resize_flow(v, h, w) for v in native]

            c_k = T.concat([c0, c1], axis=0)
            c_tt = T.concat([c_t, c_t], axis=0)
            v_evt_b = T.concat(v_evt, axis=0)
            if s == 0 or "F" not in stages:
                v_fused = v_evt_b
                mask = Tensor(np.zeros((2 * n, 1, h, w)))
            else:
                v_img_up = F.resize_flow(T.concat(image_prev, axis=0), h, w)
                v_fused, mask = self.fusion[s](v_img_up, v_evt_b, c_k, c_tt)
            v_final = self.refine[s](v_fused, c_k, c_tt) if "I" in stages else v_fused
            image_prev = (v_final[:n], v_final[n:])

            out.t0.append(v_final[:n])
            out.t1.append(v_final[n:])
            out.event_t0.append(v_evt[0])
            out.event_t1.append(v_evt[1])
            out.fused_t0.append(v_fused[:n])
            out.fused_t1.append(v_fused[n:])
            out.mask_t0.append(mask[:n])
            out.mask_t1.append(mask[n:])
        return out

    def __call__(self, i0, i1, g_0t, g_t0, g_t1) -> FlowPyramids:
        return self.forward_features(self.extract_pyramids(i0, i1, g_0t, g_t0, g_t1))


def _nchw(x) -> Tensor:
    x = T.as_tensor(x)
    return x.reshape(1, *x.shape) if x.ndim == 3 else x


def full_resolution_flows(pyr: FlowPyramids, h: int, w: int) -> tuple[Tensor, Tensor]:
    """Finest-level flows resized to the input resolution (displacements rescaled)."""
    return F.resize_flow(pyr.t0[-1], h, w), F.resize_flow(pyr.t1[-1], h, w)
