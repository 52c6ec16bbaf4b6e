"""Command-line driver: gen-data, train, certify, attack, audit."""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import report
from .attacks import AttackConfig, attack_batch, frozen_parameters
from .certifier import LCB, LIP, RS, DrawCache, McConfig, certified_accuracy, certify
from .checkpoint import CheckpointError, load_network, save_network
from .config import ConfigError, build_configs, load_config
from .data import PATTERNS, DatasetFormatError, generate, read_dataset, write_dataset
from .lipschitz import block_map, expected_logit_map, random_pairs, ratios, stream_map
from .network import (
    LIP_TARGET,
    STREAM_ORDER,
    UncalibratedError,
    build_network,
    head_spectral_norm,
    require_calibrated,
)
from .noise import PHASE_AUDIT, noise_from_key
from .spectral import spectral_norm_fourier, spectral_norm_power_iter
from .streams import SPECTRAL_TOL, UnauditedKernelError
from .train import TrainingDivergence, train_adversarial, train_certified

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_INVALID_MODEL = 4
EXIT_AUDIT = 5

FULL_N = 100000
DESK_N = 2000
EXPECTED_TOL = 0.05


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def thread_count() -> int:
    raw = os.environ.get("HYCAS_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"HYCAS_THREADS must be an integer, got {raw!r}", EXIT_USAGE) from None
    if n < 0:
        raise CliError("HYCAS_THREADS must be >= 0", EXIT_USAGE)
    return n or (os.cpu_count() or 1)


def _map(fn, items):
    # results come back in input order whatever the worker count
    workers = min(thread_count(), max(1, len(items)))
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _load_data(path):
    try:
        return read_dataset(path)
    except (OSError, DatasetFormatError) as exc:
        raise CliError(f"cannot read dataset {path}: {exc}", EXIT_USAGE) from None


def _load_net(path):
    try:
        return load_network(path)
    except (OSError, CheckpointError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_USAGE) from None


def _require_valid(net) -> None:
    try:
        require_calibrated(net)
    except (UncalibratedError, UnauditedKernelError) as exc:
        raise CliError(f"invalid model state: {exc}", EXIT_INVALID_MODEL) from None


def _check_shape(net, x) -> None:
    if tuple(x.shape[1:]) != tuple(net.input_shape):
        raise CliError(f"dataset images {x.shape[1:]} do not match network input {net.input_shape}",
                       EXIT_USAGE)


def _write(path, text: str) -> None:
    try:
        with open(path, "w", newline="") as f:
            f.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_USAGE) from None


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.count < 0:
        raise CliError("--count must be >= 0", EXIT_USAGE)
    try:
        x, y = generate(args.count, args.hw, args.classes, args.pattern, args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    try:
        write_dataset(args.out, x, y, args.classes)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_USAGE) from None
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        values = load_config(args.config)
        cfg, arch = build_configs(values, args.mode == "adversarial")
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    x, y, k = _load_data(args.data)
    try:
        net = build_network(tuple(x.shape[1:]), k, **arch)
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad architecture: {exc}", EXIT_USAGE) from None
    trainer = train_adversarial if args.mode == "adversarial" else train_certified
    try:
        net, hist = trainer(net, (x, y), cfg)
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    try:
        save_network(net, args.out_checkpoint)
    except OSError as exc:
        raise CliError(f"cannot write {args.out_checkpoint}: {exc}", EXIT_USAGE) from None
    lines = ["epoch,loss,train_accuracy,max_kernel_norm"]
    for e, (loss, acc, audit) in enumerate(zip(hist.loss, hist.accuracy, hist.audits)):
        lines.append(f"{e},{loss!r},{acc!r},{max(audit.values())!r}")
    _write(args.out_checkpoint + ".history.csv", "\n".join(lines) + "\n")
    final = hist.accuracy[-1] if hist.accuracy else float("nan")
    print(f"trained {cfg.epochs} epochs; final train accuracy {final:.4f}; "
          f"lip bound {net.lip_bound:.6g}; checkpoint {args.out_checkpoint}")
    return EXIT_OK


def cmd_certify(args) -> int:
    net = _load_net(args.checkpoint)
    _require_valid(net)
    x, y, _ = _load_data(args.data)
    _check_shape(net, x)
    n = args.n if args.n is not None else (FULL_N if args.paper_scale else DESK_N)
    try:
        cfg = McConfig(args.n0, n, args.alpha, args.sigma)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    if args.every < 1:
        raise CliError("--every must be >= 1", EXIT_USAGE)
    indices = list(range(0, x.shape[0], args.every))
    cache = DrawCache()

    def job(i):
        return i, certify(net, x[i], cfg, args.seed, cache, lcb_samples=args.lcb_samples)

    with frozen_parameters(net):
        if indices:
            # warm the shared draw cache before fanning out
            first = [job(indices[0])]
            results = first + _map(job, indices[1:])
        else:
            results = []
    rows, side, certs, labels = [], [], [], []
    per_method = {RS: [], LIP: []}
    for i, c in results:
        b = c.extra["branches"]
        base = int(np.argmax(b[LIP].extra["logits"]))
        rows.append(dict(sample_index=i, true_label=int(y[i]), predicted_label=c.label, method=c.method,
                         radius_l2=c.radius_l2, radius_linf=c.radius_linf, abstain=c.abstain,
                         clean_correct=base == int(y[i]), attacked_correct=None, epsilon=None))
        lcb = b.get(LCB)
        side.append(dict(sample_index=i, rs_label=b[RS].label, rs_radius_l2=b[RS].radius_l2,
                         rs_abstain=b[RS].abstain, rs_p_lb=float(b[RS].extra["p_lb"]),
                         lip_label=b[LIP].label, lip_radius_l2=b[LIP].radius_l2, lip_abstain=b[LIP].abstain,
                         lcb_radius_l2=None if lcb is None else lcb.radius_l2,
                         lcb_abstain=None if lcb is None else lcb.abstain))
        certs.append(c)
        labels.append(int(y[i]))
        per_method[RS].append(b[RS])
        per_method[LIP].append(b[LIP])
    summary = [f"certified {len(rows)} samples (every {args.every}); sigma={args.sigma!r} n0={cfg.n0} "
               f"n={cfg.n} alpha={cfg.alpha!r} seed={args.seed}"]
    for name, cs in (("combined", certs), (RS, per_method[RS]), (LIP, per_method[LIP])):
        acc = certified_accuracy(cs, labels, report.RADIUS_GRID)
        summary.append(f"certified_accuracy[{name}] " +
                       " ".join(f"r={r!r}:{a!r}" for r, a in zip(report.RADIUS_GRID, acc)))
    _write(args.out_report, report.render(rows, summary))
    _write(args.out_report + ".branches.csv", report.render(side, (), report.BRANCH_COLUMNS))
    for line in summary:
        print(line)
    return EXIT_OK


def cmd_attack(args) -> int:
    net = _load_net(args.checkpoint)
    _require_valid(net)
    x, y, _ = _load_data(args.data)
    _check_shape(net, x)
    try:
        cfg = AttackConfig(epsilon=args.eps, step=args.step, iters=args.steps, restarts=args.restarts,
                           seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    starts = list(range(0, x.shape[0], args.batch_size))

    def job(a):
        sl = slice(a, a + args.batch_size)
        clean, adv, _ = attack_batch(net, x[sl], y[sl], cfg, args.method, start=a)
        return a, clean, adv

    with frozen_parameters(net):
        results = _map(job, starts)
    rows = []
    for a, clean, adv in results:
        for j in range(len(clean)):
            i = a + j
            rows.append(dict(sample_index=i, true_label=int(y[i]), predicted_label=int(adv[j]),
                             method=args.method, radius_l2=None, radius_linf=None, abstain=False,
                             clean_correct=int(clean[j]) == int(y[i]), attacked_correct=int(adv[j]) == int(y[i]),
                             epsilon=float(args.eps)))
    n = max(len(rows), 1)
    clean_acc = sum(r["clean_correct"] for r in rows) / n
    robust = sum(r["attacked_correct"] for r in rows) / n
    summary = [f"method={args.method} eps={args.eps!r} steps={args.steps} restarts={args.restarts} seed={args.seed}",
               f"clean_accuracy {clean_acc!r}", f"robust_accuracy {robust!r}"]
    _write(args.out_report, report.render(rows, summary))
    for line in summary:
        print(line)
    return EXIT_OK


def cmd_audit(args) -> int:
    net = _load_net(args.checkpoint)
    hw = net.input_shape[:2]
    rng = np.random.default_rng(args.seed)
    records = []
    violations = []

    def record(component, quantity, value, limit):
        ok = limit is None or value <= limit
        records.append((component, quantity, repr(float(value)), "" if limit is None else repr(float(limit)),
                        "ok" if ok else "VIOLATION"))
        if not ok:
            violations.append(f"{component} {quantity}={value:.6g} > {limit:.6g}")

    kernel_ok = True
    for k in net.kernels():
        s = spectral_norm_fourier(k, hw)
        record(k.name, "fourier_norm", s, 1.0 + SPECTRAL_TOL)
        record(k.name, "power_iter_norm", spectral_norm_power_iter(k, hw, 20, seed=args.seed), None)
        kernel_ok &= s <= 1.0 + SPECTRAL_TOL
    x0, x1 = random_pairs(args.pairs, net.input_shape, rng)
    frozen = noise_from_key(args.seed, PHASE_AUDIT)
    with frozen_parameters(net):
        for i, block in enumerate(net.blocks):
            # each block is probed on inputs of its own channel count
            b0, b1 = random_pairs(args.pairs, tuple(hw) + (block.in_channels,), rng)
            for v in STREAM_ORDER:
                r = ratios(stream_map(net, i, v, frozen), b0, b1).max(initial=0.0)
                record(f"blocks.{i}.{v}", "sampled_ratio_fixed_noise", r, 2.0 + SPECTRAL_TOL)
            r = ratios(block_map(net, i, frozen), b0, b1).max(initial=0.0)
            record(f"blocks.{i}", "sampled_ratio_fixed_noise", r, 2.0 + SPECTRAL_TOL)
        r = ratios(lambda z: net.logits(z, frozen), x0, x1).max(initial=0.0)
        record("network", "logit_ratio_fixed_noise", r, LIP_TARGET + SPECTRAL_TOL)
        if args.mc_samples > 0:
            r = ratios(expected_logit_map(net, args.mc_samples, args.seed), x0, x1).max(initial=0.0)
            record("network", "logit_ratio_averaged_noise", r, LIP_TARGET + EXPECTED_TOL)
    if kernel_ok:
        bound = 2.0 ** len(net.blocks) * head_spectral_norm(net)
        record("network", "lipschitz_bound", bound, LIP_TARGET * (1 + 1e-9))
    record("network", "calibrator_gamma", net.calibrator_gamma, None)
    lines = ["component,quantity,value,limit,status"]
    buf = []
    for rec in records:
        buf.append(",".join(rec))
    text = "\n".join(lines + buf) + "\n"
    text += f"# violations {len(violations)}\n"
    _write(args.out_report, text)
    if violations:
        for v in violations:
            print(f"audit violation: {v}", file=sys.stderr)
        return EXIT_AUDIT
    print(f"audit passed ({len(records)} checks)")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hycas", description="Certified stochastic-stream classifiers.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=256)
    g.add_argument("--hw", type=int, default=8)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--pattern", choices=PATTERNS, default="blob-stripe")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and calibrate a network")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--mode", choices=("certified", "adversarial"), default="certified")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", help="certify every k-th sample")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--sigma", type=float, default=0.25)
    c.add_argument("--n0", type=int, default=100)
    c.add_argument("--n", type=int, default=None,
                   help=f"main Monte-Carlo draws (default {DESK_N}, or {FULL_N} with --paper-scale)")
    c.add_argument("--alpha", type=float, default=0.001)
    c.add_argument("--every", type=int, default=5)
    c.add_argument("--paper-scale", action="store_true")
    c.add_argument("--lcb-samples", type=int, default=0,
                   help="internal-noise samples for the confidence-bounded margin branch (0 = off)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out-report", required=True)
    c.set_defaults(func=cmd_certify)

    a = sub.add_parser("attack", help="l-infinity attack and robust accuracy")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--eps", type=float, default=8 / 255)
    a.add_argument("--step", type=float, default=20 / 255)
    a.add_argument("--steps", type=int, default=20)
    a.add_argument("--restarts", type=int, default=5)
    a.add_argument("--method", choices=("pgd", "apgd"), default="apgd")
    a.add_argument("--batch-size", type=int, default=64)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out-report", required=True)
    a.set_defaults(func=cmd_attack)

    u = sub.add_parser("audit", help="spectral and sampled Lipschitz audit")
    u.add_argument("--checkpoint", required=True)
    u.add_argument("--pairs", type=int, default=200)
    u.add_argument("--mc-samples", type=int, default=16)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out-report", required=True)
    u.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
