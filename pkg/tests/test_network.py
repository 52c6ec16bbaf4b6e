import numpy as np
import pytest

from hycas import tensor as T
from hycas.network import (
    STREAM_ORDER,
    UncalibratedError,
    block_forward,
    build_network,
    calibrate,
    draw_block,
    gate_weights,
    network_lip_bound,
    require_calibrated,
)
from hycas.noise import NoiseState, noise_from_key
from hycas.streams import SNCAN, UnauditedKernelError, stream_forward


def net_with_head(blocks, head):
    net = build_network((4, 4, 1), 2, channels=(2,) * blocks, seed=0)
    net.head_weight.data = head
    return net


def unit_head(feat, top=1.0):
    m = np.zeros((2, feat))
    m[0, 0] = top
    m[1, 1] = 0.5 * top
    return m


def test_gates_equal_logits():
    a = gate_weights(np.zeros((3, 5))).data
    assert np.allclose(a, 1 / 3)


def test_gates_one_dominant_logit():
    lam = np.zeros((3, 1))
    lam[0, 0] = 10.0
    a = gate_weights(lam).data[:, 0]
    assert np.allclose(a, [0.999909, 0.0000454, 0.0000454], atol=5e-7)


def test_gates_shift_invariant_and_simplex():
    lam = np.random.default_rng(0).standard_normal((3, 6)) * 4
    a = gate_weights(lam).data
    assert np.allclose(a, gate_weights(lam + np.arange(6.0)).data)
    assert np.allclose(a.sum(axis=0), 1, atol=1e-7) and (a >= 0).all()


def test_block_concentrated_on_one_stream():
    net = build_network((6, 6, 2), 2, channels=(4,), seed=1)
    b = net.blocks[0]
    lam = np.full((3, 4), -60.0)
    lam[STREAM_ORDER.index(SNCAN)] = 60.0
    b.gate_logits.data = lam
    s = NoiseState(4, 5)
    x = np.random.default_rng(0).standard_normal((2, 6, 6, 2))
    d = draw_block(b, [s], 0, (6, 6))
    expect = stream_forward(T.constant(x), b.streams[SNCAN], d.masks[SNCAN]).data
    assert np.allclose(block_forward(T.constant(x), b, s).data, expect, atol=1e-12)


def test_block_zero_input():
    net = build_network((6, 6, 2), 2, channels=(4,), seed=1)
    out = block_forward(T.constant(np.zeros((1, 6, 6, 2))), net.blocks[0], NoiseState(1, 2))
    assert np.array_equal(out.data, np.zeros((1, 6, 6, 4)))


@pytest.mark.parametrize("fusion", [False, True])
def test_block_ratio_at_most_two(fusion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for draw in range(3):
        net = build_network((6, 6, 2), 2, channels=(4,), fusion_rani=fusion, seed=draw)
        net.blocks[0].gate_logits.data = rng.standard_normal((3, 4)) * 2
        s = noise_from_key(5, draw)
        x = rng.standard_normal((1000, 6, 6, 2))
        d = rng.standard_normal(x.shape)
        d *= (10.0 ** rng.uniform(-3, 0.5, 1000) / np.linalg.norm(d.reshape(1000, -1), axis=1)).reshape(-1, 1, 1, 1)
        fx = block_forward(T.constant(x), net.blocks[0], s).data
        fy = block_forward(T.constant(x + d), net.blocks[0], s).data
        r = np.linalg.norm((fx - fy).reshape(1000, -1), axis=1) / np.linalg.norm(d.reshape(1000, -1), axis=1)
        worst = max(worst, r.max())
    assert worst <= 2 + 1e-6


def test_stream_shape_mismatch_rejected():
    net = build_network((6, 6, 2), 2, channels=(4,), seed=1)
    b = net.blocks[0]
    b.streams[SNCAN].kernels[0].weight.data = b.streams[SNCAN].kernels[0].K[:, :, :, :2]
    with pytest.raises(T.ShapeError):
        block_forward(T.constant(np.ones((1, 6, 6, 2))), b, NoiseState(0, 0))


def test_lip_bound_examples():
    assert network_lip_bound(net_with_head(1, unit_head(32))) == pytest.approx(2.0)
    assert network_lip_bound(net_with_head(3, unit_head(32))) == pytest.approx(8.0)
    head = np.random.default_rng(0).standard_normal((2, 32))
    expect = 2.0 * np.linalg.svd(head, compute_uv=False)[0]
    assert network_lip_bound(net_with_head(1, head)) == pytest.approx(expect, rel=1e-12)


def test_lip_bound_rejects_unaudited_kernel():
    net = build_network((4, 4, 1), 2, channels=(2,), seed=0)
    spec = net.blocks[0].streams[SNCAN].kernels[0]
    spec.weight.data = spec.K * 3
    with pytest.raises(UnauditedKernelError, match=spec.name):
        network_lip_bound(net)


def test_calibrate_examples():
    net = calibrate(net_with_head(1, unit_head(32, 0.75)))
    assert net.calibrator_gamma == 1.0 and net.lip_bound == pytest.approx(1.5)
    net = calibrate(net_with_head(3, unit_head(32)))
    assert net.calibrator_gamma == pytest.approx(0.25)
    assert network_lip_bound(net) == pytest.approx(2.0)


def test_calibrate_keeps_argmax():
    net = build_network((4, 4, 1), 3, channels=(2, 2), seed=2)
    net.head_weight.data *= 40
    x = np.random.default_rng(0).random((50, 4, 4, 1))
    s = NoiseState(1, 1)
    before = net.logits(x, s).argmax(axis=1)
    calibrate(net)
    assert net.calibrator_gamma < 1
    assert np.array_equal(before, net.logits(x, s).argmax(axis=1))


def test_uncalibrated_rejected():
    net = net_with_head(2, unit_head(32))
    with pytest.raises(UncalibratedError):
        require_calibrated(net)
    assert require_calibrated(calibrate(net)) <= 2.0 + 1e-12


def test_chunked_logits_match_single_draws():
    from hycas.noise import noise_stream

    net = build_network((4, 4, 1), 2, channels=(2,), seed=0)
    states = noise_stream(3, 1, 300)
    x = np.random.default_rng(0).random((300, 4, 4, 1))
    batched = net.logits(x, states)
    single = np.concatenate([net.logits(x[i:i + 1], states[i]) for i in (0, 255, 256, 299)])
    assert np.allclose(batched[[0, 255, 256, 299]], single, atol=1e-12)
