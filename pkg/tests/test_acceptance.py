"""End-to-end acceptance checks; each test logs one PASS/FAIL line via ``record``.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they happen; they are
also repeated in the terminal summary.
"""

import time

import numpy as np
import pytest

from hycas import tensor as T
from hycas.attacks import AttackConfig, robust_accuracy
from hycas.certifier import LIP, RS, DrawCache, McConfig, certified_accuracy, certify, frozen_noise, rs_certify
from hycas.cli import main
from hycas.data import generate
from hycas.lipschitz import block_map, expected_logit_map, random_pairs, ratios, stream_map
from hycas.network import STREAM_ORDER, _block_forward, build_network, draw_block, require_calibrated
from hycas.noise import PHASE_MAIN, noise_stream
from hycas.spectral import spectral_norm_fourier, spectral_norm_power_iter
from hycas.stats import clopper_pearson_lower, inv_gauss_cdf
from hycas.streams import make_stream, stream_forward
from hycas.train import TrainConfig, clean_accuracy, train_adversarial, train_certified

from helpers import (
    HalfspaceClassifier,
    binomial_tail_lower,
    circulant_matrix,
    fd_check,
    gaussian_quantile_by_quadrature,
    record,
)

CERTIFIED_RECIPE = dict(epochs=20, batch_size=32, learning_rate=0.01, optimizer="adamw", sigma=0.25, seed=0)


@pytest.fixture(scope="module")
def blob_net():
    """8x8 blob-stripe classifier trained in certified mode, with its held-out split."""
    train = generate(512, seed=10)
    test = generate(400, seed=99)
    net, hist = train_certified(build_network(channels=(2, 2), seed=0), train, TrainConfig(**CERTIFIED_RECIPE))
    return net, hist, test


@pytest.fixture(scope="module")
def toy():
    """4x4 single-block model small enough to linearise per noise draw, plus its certificates."""
    train = generate(512, hw=4, seed=10)
    x, y = generate(60, hw=4, seed=99)
    net, _ = train_certified(build_network((4, 4, 1), 2, channels=(2,), seed=0), train,
                             TrainConfig(**CERTIFIED_RECIPE))
    cfg = McConfig(n0=100, n=2000, alpha=0.001, sigma=0.25)
    cache = DrawCache()
    certs = [certify(net, xi, cfg, 0, cache) for xi in x]
    return net, x, y, certs, cfg


# --------------------------------------------------------------------------
# 1: spectral norms


def test_criterion_1_spectral_norms():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_svd = worst_pi = 0.0
    for _ in range(50):
        kh, kw = rng.integers(1, 4, 2)
        cin, cout = rng.integers(1, 5, 2)
        h, w = rng.integers(max(kh, 2), 9), rng.integers(max(kw, 2), 9)
        k = rng.standard_normal((kh, kw, cin, cout))
        exact = spectral_norm_fourier(k, (h, w))
        svd = np.linalg.svd(circulant_matrix(k, h, w), compute_uv=False)[0]
        worst_svd = max(worst_svd, abs(exact - svd))
        pi = spectral_norm_power_iter(k, (h, w), T=20, seed=int(rng.integers(1 << 30)))
        worst_pi = max(worst_pi, abs(pi - exact) / exact)
    took = time.perf_counter() - start
    ok = worst_svd <= 1e-8 and worst_pi <= 0.02 and took < 30
    record(1, ok, f"max |fourier - svd| {worst_svd:.2e}, max PI rel err {worst_pi:.4f}, {took:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 2: fixed-noise ratios of streams and fused blocks


def test_criterion_2_fixed_noise_ratios():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = {}
    for draw in range(3):
        for fusion in (False, True):
            net = build_network((6, 6, 2), 2, channels=(4,), fusion_rani=fusion, seed=100 * draw + fusion)
            net.blocks[0].gate_logits.data = 2 * rng.standard_normal((3, 4))
            s = noise_stream(77, PHASE_MAIN, 1, start=draw)[0]
            x, y = random_pairs(1000, (6, 6, 2), rng)
            maps = {f"block{'+fusion' if fusion else ''}": block_map(net, 0, s)}
            if not fusion:
                maps.update({v: stream_map(net, 0, v, s) for v in STREAM_ORDER})
            for name, f in maps.items():
                worst[name] = max(worst.get(name, 0.0), ratios(f, x, y).max())
    took = time.perf_counter() - start
    ok = max(worst.values()) <= 2 + 1e-6 and took < 60
    record(2, ok, ", ".join(f"{k} {v:.4f}" for k, v in worst.items()) + f", {took:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 3: averaged-noise logit ratio on a trained, calibrated network


def test_criterion_3_expected_logit_ratio(blob_net):
    net = blob_net[0]
    start = time.perf_counter()
    require_calibrated(net)
    x, y = random_pairs(300, net.input_shape, np.random.default_rng(8))
    r = ratios(expected_logit_map(net, 256, seed=4), x, y).max()
    took = time.perf_counter() - start
    ok = r <= 2.05 and took < 120
    record(3, ok, f"max ratio of 256-draw mean logits {r:.4f}, {took:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 4: soundness fuzzing on a linearised toy


def draw_matrices(net, states):
    """Per-draw matrices B_j of the (linear) pre-sort block map, shape (M, H*W*C_out, H*W*C_in)."""
    block = net.blocks[0]
    hw = net.input_shape[:2]
    d_in = int(np.prod(net.input_shape))
    out = []
    for a in range(0, len(states), 256):
        part = states[a:a + 256]
        draws = draw_block(block, part, 0, hw)
        cols = []
        for k in range(d_in):
            e = np.zeros((len(part), d_in))
            e[:, k] = 1.0
            z = _block_forward(T.constant(e.reshape((len(part),) + net.input_shape)), block, draws)[0].data
            cols.append(z.reshape(len(part), -1))
        out.append(np.stack(cols, axis=2))
    return np.concatenate(out)


class LinearisedVotes:
    """Logit gap z1 - z0 of the two-class toy under M fixed (epsilon, Omega) draws.

    Sorting a pair gives (min, max) = (s - |t|, s + |t|) / 2 with s the sum and t the
    difference, so the gap is linear in x plus a weighted sum of |D_j x|.
    """

    def __init__(self, net, states):
        B = draw_matrices(net, states)
        lo, hi = B[:, 0::2, :], B[:, 1::2, :]
        v = (net.head_weight.data[1] - net.head_weight.data[0]).reshape(-1, 2)
        self.lin = np.einsum("p,mpk->mk", 0.5 * (v[:, 0] + v[:, 1]), lo + hi)
        self.diff = hi - lo
        self.w = 0.5 * (v[:, 1] - v[:, 0])
        self.bias = net.head_bias.data[1] - net.head_bias.data[0]
        self.eps = np.stack([s.epsilon.reshape(-1) for s in states])
        self.m = len(states)

    def at(self, x):
        """Return a function of perturbation batches delta (P, d) -> gaps (P, M), plus its gradient."""
        u = x.reshape(-1)[None] + self.eps
        base = (self.lin * u).sum(axis=1) + self.bias
        q0 = np.einsum("mpk,mk->mp", self.diff, u)
        flat = self.diff.reshape(-1, self.diff.shape[2])

        def gaps(delta):
            q = q0[None] + (delta @ flat.T).reshape(delta.shape[0], self.m, -1)
            return base[None] + delta @ self.lin.T + np.abs(q) @ self.w

        def grad(delta):
            q = q0 + np.einsum("mpk,k->mp", self.diff, delta)
            return self.lin + np.einsum("mp,mpk->mk", np.sign(q) * self.w, self.diff)

        return gaps, grad


def vote(gaps):
    ones = (gaps > 0).sum(axis=1)
    return (ones > gaps.shape[1] - ones).astype(int)


def sphere(rng, count, dim, radius):
    d = rng.standard_normal((count, dim))
    return radius * d / np.linalg.norm(d, axis=1, keepdims=True)


def rs_attack(gaps, grad, dim, label, radius, rng, steps=25, restarts=2):
    """Projected descent on the mean sigmoid vote for ``label``.

    Returns the lowest hard-vote share for ``label`` seen and whether any iterate flipped the vote.
    """
    sgn = 1.0 if label == 1 else -1.0
    lowest, flipped = 1.0, False
    for _ in range(restarts):
        delta = sphere(rng, 1, dim, radius)[0]
        tau = max(np.std(gaps(delta[None])[0]), 1e-12)
        for t in range(steps + 1):
            z = gaps(delta[None])
            lowest = min(lowest, float(((z[0] > 0) == (label == 1)).mean()))
            flipped |= bool(vote(z)[0] != label)
            if t == steps:
                break
            soft = 1.0 / (1.0 + np.exp(-sgn * z[0] / tau))
            g = (soft * (1 - soft) * sgn / tau) @ grad(delta) / z.shape[1]
            n = np.linalg.norm(g)
            if n == 0:
                break
            delta = delta - 0.25 * radius * (1 - t / steps) * g / n
            delta *= min(1.0, radius / np.linalg.norm(delta))
    return lowest, flipped


def lip_attack(net, x, label, radius, frozen, steps=25):
    """Projected descent on the frozen-noise logit margin; returns the smallest margin seen."""
    sign = np.where(np.arange(net.num_classes) == label, 1.0, -1.0)
    rng = np.random.default_rng(label)
    delta = sphere(rng, 1, x.size, radius)[0].reshape(x.shape)
    lowest = np.inf

    def margin(t):
        return T.tsum(T.hadamard(net.forward(t, frozen), T.constant(sign[None])))

    for t in range(steps):
        val, g = T.grad_of(margin, (x + delta)[None])
        lowest = min(lowest, val)
        n = np.linalg.norm(g)
        if n == 0:
            break
        delta = delta - 0.25 * radius * (1 - t / steps) * g[0] / n
        delta *= min(1.0, radius / np.linalg.norm(delta))
    z = net.logits((x + delta)[None], frozen)[0]
    return min(lowest, float(z @ sign))


def test_criterion_4_soundness_fuzzing(toy):
    net, xs, ys, certs, cfg = toy
    start = time.perf_counter()
    rng = np.random.default_rng(31)
    dim = int(np.prod(net.input_shape))
    states = noise_stream(9001, PHASE_MAIN, 10000, net.input_shape, cfg.sigma)
    votes = LinearisedVotes(net, states)

    # second route: the linearised gaps must reproduce the real network's logits
    probe = states[:300]
    x0 = xs[0]
    real = net.logits(x0[None] + np.stack([s.epsilon for s in probe]), [s.without_input_noise() for s in probe])
    gaps, _ = votes.at(x0)
    fast = gaps(np.zeros((1, dim)))[0, :300]
    agree = np.allclose(fast, real[:, 1] - real[:, 0], atol=1e-10)

    rs_points = lip_points = rs_bad = lip_bad = 0
    rs_low, lip_low = 1.0, np.inf
    for x, cert in zip(xs, certs):
        rs, lip = cert.extra["branches"][RS], cert.extra["branches"][LIP]
        if not rs.abstain:
            rs_points += 1
            r = 0.99 * rs.radius_l2
            gaps, grad = votes.at(x)
            flips = 0
            for a in range(0, 1000, 50):
                flips += int((vote(gaps(sphere(rng, 50, dim, r))) != rs.label).sum())
            share, flipped = rs_attack(gaps, grad, dim, rs.label, r, rng)
            rs_low = min(rs_low, share)
            rs_bad += flips + int(flipped)
        if not lip.abstain:
            lip_points += 1
            r = 0.99 * lip.radius_l2
            frozen = frozen_noise(0)
            d = sphere(rng, 1000, dim, r).reshape((1000,) + x.shape)
            flips = int((net.logits(x[None] + d, frozen).argmax(axis=1) != lip.label).sum())
            m = lip_attack(net, x, lip.label, r, frozen)
            lip_low = min(lip_low, m)
            lip_bad += flips + int(m <= 0)
    took = time.perf_counter() - start
    ok = agree and rs_points >= 50 and lip_points >= 50 and rs_bad == 0 and lip_bad == 0 and took < 300
    record(4, ok, f"linearisation agrees {agree}; RS {rs_points} pts, {rs_bad} violations, "
                  f"lowest attacked vote share {rs_low:.3f}; Lip {lip_points} pts, {lip_bad} violations, "
                  f"lowest attacked margin {lip_low:.4f}; {took:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 5: coverage of the smoothed certificate against a known true radius


def test_criterion_5_halfspace_coverage():
    start = time.perf_counter()
    alpha, reps, sigma = 0.001, 1000, 0.5
    clf = HalfspaceClassifier(dim=4, offset=0.0)
    x = np.array([0.5, 0.2, -0.3, 0.9])
    true_r = 0.5
    over = 0
    for rep in range(reps):
        cert = rs_certify(clf, x, McConfig(n0=100, n=2000, alpha=alpha, sigma=sigma), seed=10_000 + rep)
        over += int(not cert.abstain and (cert.label != 1 or cert.radius_l2 > true_r))
    limit = alpha + 3 * np.sqrt(alpha / reps)
    took = time.perf_counter() - start
    ok = over / reps <= limit and took < 180
    record(5, ok, f"over-claimed {over}/{reps} (limit {limit:.4f}), {took:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 6: statistical oracles


def test_criterion_6_statistics_oracles():
    worst_closed = max(abs(clopper_pearson_lower(n, n, 1 - a) - a ** (1 / n))
                       for n in (1, 2, 7, 100, 2000, 100000) for a in (0.001, 0.01, 0.05, 0.2))
    q_err = abs(inv_gauss_cdf(0.975) - gaussian_quantile_by_quadrature(0.975))
    rng = np.random.default_rng(6)
    worst_tail = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 2001))
        m = int(rng.integers(0, n + 1))
        a = float(10 ** rng.uniform(-4, np.log10(0.5)))
        worst_tail = max(worst_tail, abs(clopper_pearson_lower(m, n, 1 - a) - binomial_tail_lower(m, n, a)))
    ok = worst_closed <= 1e-12 and q_err <= 1e-5 and worst_tail <= 1e-9
    record(6, ok, f"m=n closed form {worst_closed:.1e}, quantile {q_err:.1e}, tail oracle {worst_tail:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 7: finite differences for every primitive and full stream


def _weighted(out, seed=3):
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tsum(T.hadamard(out, T.constant(w)))


def gradient_cases():
    rng = np.random.default_rng(70)
    W = rng.standard_normal((3, 5))
    K = rng.standard_normal((3, 3, 2, 3))
    y = np.array([0, 2, 1, 1, 0, 2, 1])
    img = T.constant(rng.standard_normal((2, 5, 4, 2)))
    rows = T.constant(rng.standard_normal((4, 5)))
    hw = (6, 6)
    cases = {
        "add": (lambda t: T.add(t, T.hadamard(t, t)), (4, 5)),
        "hadamard": (lambda t: T.hadamard(t, T.constant(np.arange(20.0).reshape(4, 5))), (4, 5)),
        "scale": (lambda t: T.scale(t, -1.7), (4, 5)),
        "relu": (T.relu, (4, 6)),
        "sigmoid": (T.sigmoid, (4, 6)),
        "clip01": (lambda t: T.clip01(T.scale(t, 0.3)), (4, 6)),
        "groupsort2": (T.groupsort2, (2, 3, 3, 4)),
        "reshape": (lambda t: T.reshape(t, (6, 4)), (4, 6)),
        "expand": (lambda t: T.expand(t, (3, 4, 6)), (4, 6)),
        "take": (lambda t: T.take(t, 1), (3, 4, 5)),
        "matmul_last": (lambda t: T.matmul_last(t, T.constant(W)), (2, 4, 3)),
        "spatial_linear": (lambda t: T.spatial_linear(t, W[:, :3], W[:2, 1:4]), (2, 3, 3, 2)),
        "conv2d_circular": (lambda t: T.conv2d(t, K), (2, 5, 5, 2)),
        "conv2d_zero_stride2": (lambda t: T.conv2d(t, K, T.ZERO, 2), (2, 6, 5, 2)),
        "conv2d_kernel": (lambda k: T.conv2d(img, k), (3, 3, 2, 3)),
        "dense": (lambda t: T.dense(t, T.constant(W), T.constant(np.ones(3))), (4, 5)),
        "dense_weight": (lambda w: T.dense(rows, w, T.constant(np.ones(4))),
                         (4, 5)),
        "gap": (T.gap, (2, 3, 4, 3)),
        "softmax": (lambda t: T.softmax(t, axis=0), (3, 7)),
        "mean": (lambda t: T.mean(T.hadamard(t, t)), (4, 5)),
        "softmax_crossentropy": (lambda t: T.softmax_crossentropy(t, y), (7, 3)),
    }
    for v in STREAM_ORDER:
        p = make_stream(v, 2, 4, hw, np.random.default_rng(1))
        net = build_network(hw + (2,), 2, channels=(4,), seed=1)
        d = draw_block(net.blocks[0], noise_stream(5, PHASE_MAIN, 2), 0, hw)
        cases[f"stream {v}"] = (
            lambda t, p=p, d=d, v=v: stream_forward(t, p, T.constant(d.masks[v].data), d.w_sn if v == "RPFAN" else None),
            (2,) + hw + (2,))
    net = build_network(hw + (2,), 2, channels=(4, 4), seed=2)
    s = noise_stream(6, PHASE_MAIN, 1)[0]
    cases["network logits"] = (lambda t: net.forward(t, s), (2,) + hw + (2,))
    return cases


def test_criterion_7_finite_differences():
    worst, names = 0.0, []
    for name, (fn, shape) in gradient_cases().items():
        assert int(np.prod(shape)) >= 20, name
        x = np.random.default_rng(len(name)).standard_normal(shape)
        if name in ("relu", "clip01"):
            # keep every coordinate clear of the kinks
            x = np.sign(x) * (0.05 + np.abs(x))
        err = fd_check(lambda t, fn=fn: _weighted(fn(t)), x, coords=20)
        worst = max(worst, err)
        if err >= 1e-4:
            names.append(name)
    ok = worst < 1e-4
    record(7, ok, f"{len(gradient_cases())} cases, worst relative error {worst:.2e}"
                  + (f", failing {names}" if names else ""))
    assert ok


# --------------------------------------------------------------------------
# 8: certified training accuracy and adversarial training benefit


def test_criterion_8a_certified_training(blob_net):
    net, hist, test = blob_net
    acc = clean_accuracy(net, test)
    audits_ok = all(v <= 1 + 1e-6 for a in hist.audits for k, v in a.items() if k.endswith("kernel"))
    ok = acc >= 0.95 and hist.seconds < 120 and audits_ok and len(hist.audits) == CERTIFIED_RECIPE["epochs"]
    record(8, ok, f"certified training: clean test accuracy {acc:.4f}, {hist.seconds:.1f}s, "
                  f"audits pass every epoch {audits_ok}, gamma {net.calibrator_gamma:.3f}")
    assert ok


def test_criterion_8b_adversarial_beats_clean():
    start = time.perf_counter()
    evaluation = AttackConfig(epsilon=0.05, step=0.0125, iters=20, restarts=1, seed=7)
    test = generate(200, seed=99)
    clean_scores, adv_scores = [], []
    for s in range(5):
        train = generate(256, seed=10 + s)
        base = dict(epochs=10, batch_size=32, learning_rate=0.01, optimizer="adamw", sigma=0.0, seed=s)
        clean_net, _ = train_certified(build_network(seed=s), train, TrainConfig(**base))
        attack = AttackConfig(epsilon=0.05, step=0.02, iters=3, restarts=1, seed=s)
        adv_net, _ = train_adversarial(build_network(seed=s), train, TrainConfig(attack=attack, **base))
        clean_scores.append(robust_accuracy(clean_net, test, evaluation))
        adv_scores.append(robust_accuracy(adv_net, test, evaluation))
    took = time.perf_counter() - start
    ok = np.mean(adv_scores) > np.mean(clean_scores)
    record(8, ok, f"robust accuracy at eps 0.05 over 5 seeds: adversarial {np.mean(adv_scores):.3f} "
                  f"vs clean twin {np.mean(clean_scores):.3f}, {took:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 9: monotone accuracy curves


def test_criterion_9_monotone_curves(toy, blob_net):
    net4, _, ys, certs, _ = toy
    radii = np.linspace(0.0, 1.0, 21)
    cert_acc = certified_accuracy(certs, ys, radii)
    net, _, test = blob_net
    x, y = test[0][:200], test[1][:200]
    eps_grid = (0.0, 0.02, 0.05, 0.1)
    rob = [robust_accuracy(net, (x, y), AttackConfig(epsilon=e, step=e / 4, iters=10, restarts=1, seed=1))
           for e in eps_grid]
    mono_c = all(b <= a for a, b in zip(cert_acc, cert_acc[1:]))
    mono_r = all(b <= a for a, b in zip(rob, rob[1:]))
    ok = mono_c and mono_r
    record(9, ok, f"certified accuracy non-increasing {mono_c} ({cert_acc[0]:.3f} -> {cert_acc[-1]:.3f}); "
                  f"robust accuracy over eps {eps_grid}: {[round(r, 3) for r in rob]}")
    assert ok


# --------------------------------------------------------------------------
# 10: bit-identical artefacts across runs


def pipeline(d):
    data = d / "data.hyd"
    cfg = d / "run.cfg"
    cfg.write_text("channels = 2\nepochs = 2\nbatch_size = 16\nlearning_rate = 0.05\nsigma = 0.25\nseed = 3\n")
    ck = d / "model.hyc"
    codes = [
        main(["gen-data", "--out", str(data), "--count", "64", "--hw", "6", "--seed", "5"]),
        main(["train", "--config", str(cfg), "--data", str(data), "--out-checkpoint", str(ck)]),
        main(["certify", "--checkpoint", str(ck), "--data", str(data), "--n0", "20", "--n", "200",
              "--every", "4", "--out-report", str(d / "cert.csv")]),
        main(["attack", "--checkpoint", str(ck), "--data", str(data), "--eps", "0.05", "--steps", "5",
              "--restarts", "2", "--out-report", str(d / "attack.csv")]),
        main(["audit", "--checkpoint", str(ck), "--pairs", "50", "--mc-samples", "4",
              "--out-report", str(d / "audit.csv")]),
    ]
    return codes, {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_criterion_10_bit_reproducibility(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    codes_a, files_a = pipeline(a)
    codes_b, files_b = pipeline(b)
    same = sorted(k for k in files_a if files_a[k] == files_b.get(k))
    ok = codes_a == codes_b == [0] * 5 and files_a.keys() == files_b.keys() and len(same) == len(files_a)
    record(10, ok, f"exit codes {codes_a}; identical files {len(same)}/{len(files_a)}: {same}")
    assert ok
