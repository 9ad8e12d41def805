import numpy as np
import pytest

from evfi import tensor as T
from evfi.biofnet import FlowPyramids
from evfi.gradsuite import _randomize_zero_heads
from evfi.synthesis import AttentionConfig, InteractiveAttention, SelfAttention, SynthesisNet, channel_attention
from evfi.tensor import Tensor


def zero_flows(n, size):
    sizes = [size // 8, size // 4, size // 2]
    return FlowPyramids(t0=[Tensor(np.zeros((n, 2, s, s))) for s in sizes],
                        t1=[Tensor(np.zeros((n, 2, s, s))) for s in sizes])


def random_flows(rng, n, size, scale=0.7):
    sizes = [size // 8, size // 4, size // 2]
    return FlowPyramids(t0=[Tensor(rng.uniform(-scale, scale, (n, 2, s, s))) for s in sizes],
                        t1=[Tensor(rng.uniform(-scale, scale, (n, 2, s, s))) for s in sizes])


def synth_inputs(rng, size=32, bins=16):
    return (rng.uniform(size=(1, 3, size, size)), rng.uniform(size=(1, 3, size, size)),
            rng.normal(size=(1, bins, size, size)), rng.normal(size=(1, bins, size, size)))


@pytest.fixture(scope="module")
def net():
    return SynthesisNet(AttentionConfig(base_channels=4))


def test_output_scales_and_range(net):
    rng = np.random.default_rng(0)
    with T.no_grad():
        outs = net(*synth_inputs(rng, 64), zero_flows(1, 64))
    assert [o.shape[-1] for o in outs] == [16, 32, 64]
    assert all(np.all((o.data >= 0) & (o.data <= 1)) for o in outs)


def test_zero_flow_warp_features(net):
    rng = np.random.default_rng(1)
    i0, i1, g0, g1 = synth_inputs(rng)
    with T.no_grad():
        inp = net.encode(i0, i1, g0, g1)
        for s in range(3):
            f_w, wi0, wi1 = net.build_warp_features(inp, zero_flows(1, 32), s)
            np.testing.assert_array_equal(wi0.data, inp.frames0[s].data)
            np.testing.assert_array_equal(wi1.data, inp.frames1[s].data)
            assert f_w.shape[1] == net.cfg.channels(s)


def test_warp_features_differentiable_in_flows():
    rng = np.random.default_rng(2)
    net = SynthesisNet(AttentionConfig(base_channels=2, bins=4))
    i0, i1, g0, g1 = synth_inputs(rng, 16, 4)
    flows = random_flows(rng, 1, 16)
    with T.no_grad():
        inp = net.encode(i0, i1, g0, g1)
    r = Tensor(rng.normal(size=(1, 8, 4, 4)))

    def f(v0, v1):
        pyr = FlowPyramids(t0=[v0] + flows.t0[1:], t1=[v1] + flows.t1[1:])
        return (net.build_warp_features(inp, pyr, 0)[0] * r).sum()

    assert T.grad_check(f, [flows.t0[0], flows.t1[0]]) < 1e-4


def test_synthesis_features_ignore_flows(net):
    rng = np.random.default_rng(3)
    with T.no_grad():
        inp = net.encode(*synth_inputs(rng))
        a = net.build_synthesis_features(inp, 1).data
        net.build_warp_features(inp, random_flows(rng, 1, 32), 1)
        b = net.build_synthesis_features(inp, 1).data
    np.testing.assert_array_equal(a, b)


def test_synthesis_features_symmetric_under_frame_swap(net):
    rng = np.random.default_rng(4)
    frame = rng.uniform(size=(1, 3, 32, 32))
    z = np.zeros((1, 16, 32, 32))
    with T.no_grad():
        a = net.build_synthesis_features(net.encode(frame, frame, z, z), 2).data
        b = net.build_synthesis_features(net.encode(frame, frame.copy(), z, z), 2).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_attention_rows_normalized_and_identity_endpoint():
    rng = np.random.default_rng(5)
    att = InteractiveAttention(rng, 4, heads=2)
    q, fw, fs = (Tensor(rng.normal(size=(1, 4, 5, 5))) for _ in range(3))
    att.record = []
    out = att(q, fw, fs)
    assert out.shape == q.shape
    for a in att.record:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)
    att.record = None
    att.fuse.weight.data[:] = 0.0
    np.testing.assert_array_equal(att(q, fw, fs).data, q.data)


def test_attention_head_mismatch():
    with pytest.raises(ValueError):
        InteractiveAttention(np.random.default_rng(0), 5, heads=2)
    att = InteractiveAttention(np.random.default_rng(0), 4, heads=2)
    with pytest.raises(ValueError):
        att(Tensor(np.zeros((1, 4, 3, 3))), Tensor(np.zeros((1, 4, 3, 4))), Tensor(np.zeros((1, 4, 3, 3))))


def test_attention_spatially_permutation_equivariant():
    rng = np.random.default_rng(6)
    att = InteractiveAttention(rng, 4, heads=2, dw_kernel=1)
    q, fw, fs = (rng.normal(size=(1, 4, 3, 4)) for _ in range(3))
    perm = rng.permutation(12)

    def permute(x):
        return x.reshape(1, 4, 12)[..., perm].reshape(1, 4, 3, 4)

    with T.no_grad():
        out = att(Tensor(q), Tensor(fw), Tensor(fs)).data
        out_p = att(Tensor(permute(q)), Tensor(permute(fw)), Tensor(permute(fs))).data
    np.testing.assert_allclose(permute(out), out_p, atol=1e-12)


def test_alpha_receives_gradient():
    rng = np.random.default_rng(7)
    att = InteractiveAttention(rng, 4, heads=2)
    q, fw, fs = (Tensor(rng.normal(size=(1, 4, 5, 5))) for _ in range(3))
    r = Tensor(rng.normal(size=(1, 4, 5, 5)))
    T.backward((att(q, fw, fs) * r).sum())
    assert att.log_alpha_s.grad != 0 and att.log_alpha_w.grad != 0


def test_self_attention_contract():
    rng = np.random.default_rng(8)
    sa = SelfAttention(rng, 8, heads=2, zero_out=True)
    x = Tensor(rng.normal(size=(1, 8, 4, 4)))
    np.testing.assert_array_equal(sa(x).data, x.data)
    sa = SelfAttention(rng, 8, heads=2)
    assert sa(x).shape == x.shape
    r = Tensor(rng.normal(size=x.shape))
    assert T.grad_check(lambda a: (sa(a) * r).sum(), [x]) < 1e-4


def test_channel_attention_rejects_bad_heads():
    x = Tensor(np.zeros((1, 3, 2, 2)))
    with pytest.raises(ValueError):
        channel_attention(x, x, x, 2, Tensor(np.array(0.0)))


def test_end_to_end_gradient_micro():
    rng = np.random.default_rng(9)
    net = SynthesisNet(AttentionConfig(base_channels=4, heads=1, bins=4))
    _randomize_zero_heads(net, rng)
    i0, i1, g0, g1 = (Tensor(a) for a in synth_inputs(rng, 8, 4))
    flows = FlowPyramids(t0=[Tensor(rng.uniform(-0.3, 0.3, (1, 2, s, s))) for s in (1, 2, 4)],
                         t1=[Tensor(rng.uniform(-0.3, 0.3, (1, 2, s, s))) for s in (1, 2, 4)])
    r = Tensor(rng.normal(size=(1, 3, 8, 8)))
    picks = [net.head[2].weight, net.cross[1].fuse.weight, net.refine[2].q.depthwise.weight]
    assert T.grad_check(lambda a, b, *_: (net(a, b, g0, g1, flows)[-1] * r).sum(), [i0, i1] + picks,
                        max_coords=12) < 1e-3


def test_geometry_mismatch():
    net = SynthesisNet(AttentionConfig(base_channels=2))
    rng = np.random.default_rng(10)
    i0, i1, g0, g1 = synth_inputs(rng, 16)
    with pytest.raises(ValueError):
        net(i0, i1[..., :8], g0, g1, zero_flows(1, 16))
