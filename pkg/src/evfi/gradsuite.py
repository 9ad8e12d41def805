"""Finite-difference gradient checks for every differentiable primitive and both networks."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from evfi import flow_ops as F
from evfi import tensor as T
from evfi.biofnet import EIFBiOFNet, PyramidConfig
from evfi.nn import Conv2d, Module
from evfi.synthesis import AttentionConfig, InteractiveAttention, SelfAttention, SynthesisNet
from evfi.tensor import Tensor

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _probe(rng, shape) -> np.ndarray:
    # random linear functional: makes every output coordinate matter; bind it as a
    # lambda default since the case builders below reuse the name
    return rng.normal(size=shape)


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


def _t(rng, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale)


def _flow(rng, *shape, scale: float = 1.5) -> Tensor:
    # keep sample positions away from integer grid lines, where bilinear weights kink
    f = rng.uniform(-scale, scale, size=shape)
    frac = f - np.floor(f)
    return Tensor(np.where(np.abs(frac - 0.5) > 0.45, f + 0.1, f))


def _randomize_zero_heads(net: Module, rng) -> None:
    for m in net.modules():
        if isinstance(m, Conv2d) and not np.any(m.weight.data):
            m.weight.data = rng.normal(size=m.weight.shape) * 0.2
            if m.bias is not None:
                m.bias.data = rng.normal(size=m.bias.shape) * 0.1


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list]]:
    cases = []

    x, w, b = _t(rng, 2, 3, 6, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    r = _probe(rng, (2, 4, 6, 5))
    cases.append(("conv2d", lambda x, w, b, r=r: _scalarize(T.conv2d(x, w, b, stride=1, padding=1), r), [x, w, b]))

    x, w = _t(rng, 1, 4, 8, 8), _t(rng, 2, 4, 4, 4)
    r = _probe(rng, (1, 2, 4, 4))
    cases.append(("conv2d_stride2", lambda x, w, r=r: _scalarize(T.conv2d(x, w, None, stride=2, padding=1), r), [x, w]))

    x, w = _t(rng, 1, 4, 5, 5), _t(rng, 4, 1, 3, 3)
    r = _probe(rng, (1, 4, 5, 5))
    cases.append(("conv2d_depthwise",
                  lambda x, w, r=r: _scalarize(T.conv2d(x, w, None, padding=1, groups=4), r), [x, w]))

    x, g, be = _t(rng, 2, 5, 3, 4), _t(rng, 5), _t(rng, 5)
    r = _probe(rng, (2, 5, 3, 4))
    cases.append(("layer_norm", lambda x, g, be, r=r: _scalarize(T.layer_norm(x, 1, g, be), r), [x, g, be]))

    x = _t(rng, 3, 7, scale=2.0)
    r = _probe(rng, (3, 7))
    cases.append(("softmax", lambda x, r=r: _scalarize(T.softmax(x, axis=-1), r), [x]))

    a, bm = _t(rng, 2, 3, 4), _t(rng, 2, 4, 5)
    r = _probe(rng, (2, 3, 5))
    cases.append(("matmul", lambda a, bm, r=r: _scalarize(T.matmul(a, bm), r), [a, bm]))

    x = _t(rng, 1, 2, 4, 5)
    r = _probe(rng, (1, 2, 7, 9))
    cases.append(("bilinear_resize", lambda x, r=r: _scalarize(T.bilinear_resize(x, 7, 9), r), [x]))

    src, fl = _t(rng, 1, 3, 6, 7), _flow(rng, 1, 2, 6, 7)
    r = _probe(rng, (1, 3, 6, 7))
    cases.append(("backward_warp", lambda s, f, r=r: _scalarize(F.backward_warp(s, f)[0], r), [src, fl]))

    res = _t(rng, 2, 3, 4, 4, scale=0.1)
    cases.append(("charbonnier", lambda v: F.charbonnier(v), [res]))

    fl, img = _t(rng, 1, 2, 6, 6), Tensor(rng.uniform(0, 1, size=(1, 3, 6, 6)))
    cases.append(("smoothness", lambda f: F.edge_aware_smoothness(f, img), [fl]))

    fa, fb = _t(rng, 1, 4, 7, 7), _t(rng, 1, 4, 7, 7)
    r = _probe(rng, (1, 49, 7, 7))
    cases.append(("correlation",
                  lambda a, b, r=r: _scalarize(F.local_correlation(a, b, 3, normalize=True), r), [fa, fb]))

    att = InteractiveAttention(np.random.default_rng(1), 4, heads=2)
    q, fw, fs = _t(rng, 1, 4, 5, 5), _t(rng, 1, 4, 5, 5), _t(rng, 1, 4, 5, 5)
    r = _probe(rng, (1, 4, 5, 5))
    cases.append(("interactive_attention", lambda q, fw, fs, r=r: _scalarize(att(q, fw, fs), r), [q, fw, fs]))
    cases.append(("interactive_attention_params", lambda a, b, r=r: _scalarize(att(q, fw, fs), r),
                  [att.log_alpha_s, att.q_s.pointwise.weight]))

    sa = SelfAttention(np.random.default_rng(2), 4, heads=2)
    x = _t(rng, 1, 4, 5, 5)
    r = _probe(rng, (1, 4, 5, 5))
    cases.append(("self_attention_refine", lambda x, r=r: _scalarize(sa(x), r), [x]))
    return cases


def composite_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list]]:
    size = 16
    flow_net = EIFBiOFNet(PyramidConfig(base_channels=2, bins=4, seed=3))
    _randomize_zero_heads(flow_net, rng)
    i0, i1 = Tensor(rng.uniform(0, 1, (1, 3, size, size))), Tensor(rng.uniform(0, 1, (1, 3, size, size)))
    g = [_t(rng, 1, 4, size, size) for _ in range(3)]
    r0, r1 = _probe(rng, (1, 2, 8, 8)), _probe(rng, (1, 2, 8, 8))

    def flow_fn(i0, i1, w_evt, w_ref):
        pyr = flow_net(i0, i1, *g)
        return _scalarize(pyr.t0[-1], r0) + _scalarize(pyr.t1[-1], r1)

    flow_inputs = [i0, i1, flow_net.event_flow[1].block.convs[0].weight, flow_net.refine[2].block.convs[-1].weight]

    synth = SynthesisNet(AttentionConfig(base_channels=2, heads=1, bins=4, seed=4))
    _randomize_zero_heads(synth, rng)
    with T.no_grad():
        flows = flow_net(i0, i1, *g)
    rs = _probe(rng, (1, 3, size, size))

    def synth_fn(i0, i1, w_cross, w_head):
        return _scalarize(synth(i0, i1, g[0], g[2], flows)[-1], rs)

    synth_inputs = [i0, i1, synth.cross[2].fuse.weight, synth.head[2].weight]
    return [("eif_biofnet_forward", flow_fn, flow_inputs), ("synthesis_forward", synth_fn, synth_inputs)]


def run_suite(seed: int = 0, max_coords: int = 24, include_composite: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    groups = [(primitive_cases(rng), PRIMITIVE_TOL)]
    if include_composite:
        groups.append((composite_cases(rng), COMPOSITE_TOL))
    for cases, tol in groups:
        for name, fn, inputs in cases:
            start = time.perf_counter()
            err = T.grad_check(fn, inputs, eps=1e-6, max_coords=max_coords, rng=np.random.default_rng(seed))
            out.append(CheckResult(name, err, tol, time.perf_counter() - start))
    return out


def format_report(results) -> str:
    lines = [f"{'check':<30} {'max rel err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<30} {r.error:>12.3e} {r.tolerance:>8.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
