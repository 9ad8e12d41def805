"""Fast property checks behind ``evfi selftest``; each returns (name, passed, detail)."""
from __future__ import annotations

import numpy as np

from evfi import fileio
from evfi import flow_ops as F
from evfi import tensor as T
from evfi.biofnet import EIFBiOFNet, PyramidConfig
from evfi.events import random_stream, reverse_events, voxelize
from evfi.metrics import psnr, ssim
from evfi.synthesis import InteractiveAttention
from evfi.tensor import Tensor


def check_voxel_reversal(rng, trials: int = 20):
    worst = 0.0
    for _ in range(trials):
        s = random_stream(rng, int(rng.integers(0, 300)))
        g = voxelize(s, s.t_start, s.t_end)
        gr = voxelize(reverse_events(s), s.t_start, s.t_end)
        worst = max(worst, float(np.abs(gr - (-g[::-1])).max(initial=0.0)))
    return "voxel reversal symmetry", worst <= 1e-9, f"max deviation {worst:.2e}"


def check_blend(rng):
    a, b = rng.normal(size=(2, 2, 5, 5))
    va, vb = Tensor(a), Tensor(b)
    ends = (np.array_equal(F.blend_flows(va, vb, Tensor(np.ones((1, 5, 5)))).data, a)
            and np.array_equal(F.blend_flows(va, vb, Tensor(np.zeros((1, 5, 5)))).data, b))
    m = rng.uniform(size=(1, 5, 5))
    out = F.blend_flows(va, vb, Tensor(m)).data
    inside = bool(np.all(out >= np.minimum(a, b) - 1e-15) and np.all(out <= np.maximum(a, b) + 1e-15))
    return "confidence blend endpoints/convexity", ends and inside, ""


def check_zero_cascade(rng):
    net = EIFBiOFNet(PyramidConfig(base_channels=2, bins=4))
    x = [rng.uniform(size=(1, 3, 16, 16)) for _ in range(2)] + [rng.normal(size=(1, 4, 16, 16)) for _ in range(3)]
    with T.no_grad():
        pyr = net(*x)
    zero = all(not np.any(v.data) for v in pyr.t0 + pyr.t1)
    att = InteractiveAttention(rng, 4, heads=2)
    att.fuse.weight.data[:] = 0.0
    att.fuse.bias.data[:] = 0.0
    q = rng.normal(size=(1, 4, 6, 6))
    with T.no_grad():
        same = np.array_equal(att(Tensor(q), Tensor(rng.normal(size=q.shape)), Tensor(rng.normal(size=q.shape))).data, q)
    return "zero-cascade identity", zero and same, ""


def check_metrics(rng):
    a = rng.uniform(0.2, 0.8, size=(3, 16, 16))
    ok = abs(psnr(a, a + 0.1) - 20.0) < 1e-12
    ok = ok and ssim(a, a) == 1.0 and psnr(a, a) == 100.0
    return "psnr/ssim exact cases", ok, f"psnr(+0.1) = {psnr(a, a + 0.1):.12f}"


def check_roundtrips(rng, trials: int = 50):
    for _ in range(trials):
        s = random_stream(rng, int(rng.integers(0, 200)))
        if not fileio.decode_events(fileio.encode_events(s)).same_as(s):
            return "format round-trips", False, "EVT1"
        flow = rng.normal(size=(2, int(rng.integers(1, 9)), int(rng.integers(1, 9)))).astype(np.float32)
        if fileio.decode_flow(fileio.encode_flow(flow)).tobytes() != flow.tobytes():
            return "format round-trips", False, "FLO1"
        params = {f"p{i}": rng.normal(size=tuple(rng.integers(1, 4, size=int(rng.integers(0, 4)))))
                  .astype(np.float32) for i in range(int(rng.integers(0, 4)))}
        buf = fileio.encode_checkpoint(params)
        if fileio.encode_checkpoint(fileio.decode_checkpoint(buf)) != buf:
            return "format round-trips", False, "EVFICKPT"
    return "format round-trips", True, f"{trials} trials each"


def run_selftest(seed: int = 0):
    rng = np.random.default_rng(seed)
    checks = (check_voxel_reversal, check_blend, check_zero_cascade, check_metrics, check_roundtrips)
    return [check(rng) for check in checks]
