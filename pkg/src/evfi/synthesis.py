"""Interactive-attention frame synthesis.

A query built from all input features attends, over the channel axis, to a
warping-feature branch and a synthesis-feature branch; the two results are
fused residually, refined by channel self-attention and decoded coarse to fine.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evfi import flow_ops as F
from evfi import tensor as T
from evfi.biofnet import SCALES, FlowPyramids
from evfi.nn import Conv2d, ConvBlock, LayerNorm, Module, Parameter
from evfi.tensor import Tensor

PRIOR_EPS = 1e-3


@dataclass
class AttentionConfig:
    base_channels: int = 8
    heads: int = 2
    alpha_init: float = 1.0
    dw_kernel: int = 3
    in_channels: int = 3
    bins: int = 16
    seed: int = 1

    def channels(self, s: int) -> int:
        return self.base_channels * 2 ** (SCALES[-1] - s)

    def downsample(self, s: int) -> int:
        # synthesis scales: 1/4, 1/2 and full resolution
        return 2 ** (SCALES[-1] - s)


class DSConv(Module):
    """Depthwise k x k followed by pointwise 1 x 1."""

    def __init__(self, rng, cin: int, cout: int, k: int = 3):
        self.depthwise = Conv2d(rng, cin, cin, k, groups=cin)
        self.pointwise = Conv2d(rng, cin, cout, 1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


def channel_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, log_alpha: Parameter,
                      record: list | None = None) -> Tensor:
    """``softmax(q k^T / alpha) v`` with the (C/heads x C/heads) matrix taken over channels.

    ``q`` and ``k`` are L2-normalized along the spatial axis first, so the logits
    are cosine similarities and ``alpha`` acts as a temperature.
    """
    n, c, h, w = q.shape
    if c % heads:
        raise ValueError(f"{c} channels not divisible by {heads} heads")
    shape = (n, heads, c // heads, h * w)
    qh, kh, vh = q.reshape(shape), k.reshape(shape), v.reshape(shape)
    qh = qh / (T.norm(qh, axis=-1, keepdims=True) + 1e-6)
    kh = kh / (T.norm(kh, axis=-1, keepdims=True) + 1e-6)
    logits = T.matmul(qh, kh.transpose(0, 1, 3, 2)) * T.exp(-log_alpha)
    attn = T.softmax(logits, axis=-1)
    if record is not None:
        record.append(attn.data.copy())
    return T.matmul(attn, vh).reshape(n, c, h, w)


class InteractiveAttention(Module):
    def __init__(self, rng, c: int, heads: int = 2, alpha_init: float = 1.0, dw_kernel: int = 3):
        if c % heads:
            raise ValueError(f"{c} channels not divisible by {heads} heads")
        self.c = c
        self.heads = heads
        self.norm_q = LayerNorm(c)
        self.norm_w = LayerNorm(c)
        self.norm_s = LayerNorm(c)
        self.q_s = DSConv(rng, c, c, dw_kernel)
        self.q_w = DSConv(rng, c, c, dw_kernel)
        self.k_s = DSConv(rng, c, c, dw_kernel)
        self.v_s = DSConv(rng, c, c, dw_kernel)
        self.k_w = DSConv(rng, c, c, dw_kernel)
        self.v_w = DSConv(rng, c, c, dw_kernel)
        self.log_alpha_s = Parameter(np.array(np.log(alpha_init)))
        self.log_alpha_w = Parameter(np.array(np.log(alpha_init)))
        self.fuse = Conv2d(rng, 2 * c, c, 1)
        self.record: list | None = None

    def __call__(self, q: Tensor, f_w: Tensor, f_s: Tensor) -> Tensor:
        if q.shape != f_w.shape or q.shape != f_s.shape:
            raise ValueError(f"query {q.shape}, warp {f_w.shape} and synthesis {f_s.shape} features differ")
        if q.shape[1] != self.c:
            raise ValueError(f"expected {self.c} channels, got {q.shape[1]}")
        nq, nw, ns = self.norm_q(q), self.norm_w(f_w), self.norm_s(f_s)
        att_s = channel_attention(self.q_s(nq), self.k_s(ns), self.v_s(ns), self.heads,
                                  self.log_alpha_s, self.record)
        att_w = channel_attention(self.q_w(nq), self.k_w(nw), self.v_w(nw), self.heads,
                                  self.log_alpha_w, self.record)
        return q + self.fuse(T.concat([att_s, att_w], axis=1))


class SelfAttention(Module):
    def __init__(self, rng, c: int, heads: int = 2, alpha_init: float = 1.0, dw_kernel: int = 3,
                 zero_out: bool = False):
        self.heads = heads
        self.norm = LayerNorm(c)
        self.q = DSConv(rng, c, c, dw_kernel)
        self.k = DSConv(rng, c, c, dw_kernel)
        self.v = DSConv(rng, c, c, dw_kernel)
        self.log_alpha = Parameter(np.array(np.log(alpha_init)))
        self.out = Conv2d(rng, c, c, 1, zero_init=zero_out)
        self.record: list | None = None

    def __call__(self, x: Tensor) -> Tensor:
        nx = self.norm(x)
        att = channel_attention(self.q(nx), self.k(nx), self.v(nx), self.heads, self.log_alpha, self.record)
        return x + self.out(att)


class PyramidEncoder(Module):
    """Features at full, 1/2 and 1/4 resolution, returned coarse first."""

    def __init__(self, rng, cin: int, cfg: AttentionConfig):
        c2, c1, c0 = (cfg.channels(s) for s in (2, 1, 0))
        self.stem = Conv2d(rng, cin, c2, 3)
        self.conv2 = Conv2d(rng, c2, c2, 3)
        self.down1 = Conv2d(rng, c2, c1, 4, stride=2, padding=1)
        self.conv1 = Conv2d(rng, c1, c1, 3)
        self.down0 = Conv2d(rng, c1, c0, 4, stride=2, padding=1)
        self.conv0 = Conv2d(rng, c0, c0, 3)

    def __call__(self, x: Tensor) -> list:
        act = T.leaky_relu
        f2 = act(self.conv2(act(self.stem(x))))
        f1 = act(self.conv1(act(self.down1(f2))))
        f0 = act(self.conv0(act(self.down0(f1))))
        return [f0, f1, f2]


@dataclass
class SynthesisInputs:
    frames0: list
    frames1: list
    phi0: list
    phi1: list
    ev_left: list
    ev_right: list


class SynthesisNet(Module):
    def __init__(self, cfg: AttentionConfig | None = None):
        cfg = cfg or AttentionConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        cin, b = cfg.in_channels, cfg.bins
        self.frame_encoder = PyramidEncoder(rng, cin, cfg)
        self.event_encoder = PyramidEncoder(rng, b, cfg)
        self.warp_encoder, self.synth_encoder, self.query_encoder = [], [], []
        self.state_proj, self.cross, self.refine, self.head = [], [], [], []
        for s in SCALES:
            c = cfg.channels(s)
            self.warp_encoder.append(ConvBlock(rng, 2 * cin + 4 * c, c, c, layers=2))
            self.synth_encoder.append(ConvBlock(rng, 4 * c, c, c, layers=2))
            self.query_encoder.append(ConvBlock(rng, 2 * cin + 4 * c, c, c, layers=2))
            self.state_proj.append(Conv2d(rng, cfg.channels(s - 1), c, 1) if s > 0 else None)
            self.cross.append(InteractiveAttention(rng, c, cfg.heads, cfg.alpha_init, cfg.dw_kernel))
            self.refine.append(SelfAttention(rng, c, cfg.heads, cfg.alpha_init, cfg.dw_kernel))
            self.head.append(Conv2d(rng, c, cin, 3, zero_init=True))

    # -- feature builders --------------------------------------------------
    def encode(self, i0, i1, g_0t, g_t1) -> SynthesisInputs:
        i0, i1, g_0t, g_t1 = (_nchw(x) for x in (i0, i1, g_0t, g_t1))
        n = i0.shape[0]
        for name, x in (("I1", i1), ("G_0t", g_0t), ("G_t1", g_t1)):
            if x.shape[0] != n or x.shape[-2:] != i0.shape[-2:]:
                raise ValueError(f"{name} geometry {x.shape} differs from I0 {i0.shape}")
        phi = self.frame_encoder(T.concat([i0, i1], axis=0))
        ev = self.event_encoder(T.concat([g_0t, g_t1], axis=0))
        frames0 = [F.area_downscale(i0, self.cfg.downsample(s)) for s in SCALES]
        frames1 = [F.area_downscale(i1, self.cfg.downsample(s)) for s in SCALES]
        return SynthesisInputs(frames0, frames1, [p[:n] for p in phi], [p[n:] for p in phi],
                               [e[:n] for e in ev], [e[n:] for e in ev])

    def scale_flows(self, flows: FlowPyramids, s: int, h: int, w: int):
        v0, v1 = flows.t0[s], flows.t1[s]
        return F.resize_flow(v0, h, w), F.resize_flow(v1, h, w)

    def build_warp_features(self, inp: SynthesisInputs, flows: FlowPyramids, s: int):
        """Returns (warp features, warped frame 0, warped frame 1) at synthesis scale ``s``."""
        h, w = inp.phi0[s].shape[-2:]
        v0, v1 = self.scale_flows(flows, s, h, w)
        if v0.shape[0] != inp.phi0[s].shape[0]:
            raise ValueError(f"flow batch {v0.shape[0]} differs from feature batch {inp.phi0[s].shape[0]}")
        wi0, _ = F.backward_warp(inp.frames0[s], v0)
        wi1, _ = F.backward_warp(inp.frames1[s], v1)
        wp0, _ = F.backward_warp(inp.phi0[s], v0)
        wp1, _ = F.backward_warp(inp.phi1[s], v1)
        x = T.concat([wi0, wi1, wp0, wp1, inp.ev_left[s], inp.ev_right[s]], axis=1)
        return T.leaky_relu(self.warp_encoder[s](x), 0.1), wi0, wi1

    def build_synthesis_features(self, inp: SynthesisInputs, s: int) -> Tensor:
        x = T.concat([inp.phi0[s], inp.phi1[s], inp.ev_left[s], inp.ev_right[s]], axis=1)
        return T.leaky_relu(self.synth_encoder[s](x), 0.1)

    def build_query(self, inp: SynthesisInputs, s: int, wi0: Tensor, wi1: Tensor, prev_state) -> Tensor:
        x = T.concat([inp.phi0[s], inp.phi1[s], inp.ev_left[s], inp.ev_right[s], wi0, wi1], axis=1)
        q = self.query_encoder[s](x)
        if prev_state is not None:
            h, w = q.shape[-2:]
            q = q + self.state_proj[s](T.bilinear_resize(prev_state, h, w))
        return q

    # -- forward -----------------------------------------------------------
    def __call__(self, i0, i1, g_0t, g_t1, flows: FlowPyramids) -> list:
        inp = self.encode(i0, i1, g_0t, g_t1)
        outputs = []
        state = None
        for s in SCALES:
            f_w, wi0, wi1 = self.build_warp_features(inp, flows, s)
            f_s = self.build_synthesis_features(inp, s)
            q = self.build_query(inp, s, wi0, wi1, state)
            x = self.cross[s](q, f_w, f_s)
            x = self.refine[s](x)
            state = x
            # the head refines the logit of the squashed warped-frame average
            prior = (wi0 + wi1) * (0.5 * (1 - 2 * PRIOR_EPS)) + PRIOR_EPS
            logits = self.head[s](x) + T.log(prior) - T.log(1.0 - prior)
            outputs.append(T.sigmoid(logits))
        return outputs


def _nchw(x) -> Tensor:
    x = T.as_tensor(x)
    return x.reshape(1, *x.shape) if x.ndim == 3 else x
