"""Command-line entry points.

Commands: train, eval, sweep, gradcheck, synth-data. All are
non-interactive: exit code 0 on success, 1 on failure with a single
`error: ...` line on stderr. Every run directory receives an echo of the
effective configuration.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import ops
from .config import ConfigError, RunConfig, load_config
from .data import (
    DataFileError,
    DatasetMeta,
    SplitSpec,
    WindowedDataset,
    apply_channel_means,
    channel_means,
    generate_synthetic,
    group_split,
    load_csv,
    load_windows_file,
    save_windows_file,
)
from .model import CheckpointError, build_network, default_model_config, load_checkpoint, save_checkpoint
from .metrics import emit_reports
from .tensor import Tensor
from .trainer import TrainingError, evaluate, train

__all__ = ["main", "run_gradcheck"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cetx",
        description="Consistency-trained multi-exit 1-D CNNs with entropy-gated early exit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="path to a flat key = value config file")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--seed", type=int, help="override the relevant seed from the config")

    p_train = sub.add_parser("train", help="train a model and write checkpoint + report")
    common(p_train, "output directory for checkpoint, report, and config echo")

    for name, help_text in (("eval", "evaluate a checkpoint over a phi grid"), ("sweep", "dense threshold sweep")):
        p = sub.add_parser(name, help=help_text)
        common(p, "output directory for report tables")
        p.add_argument("--checkpoint", required=True, help="checkpoint file to evaluate")
        p.add_argument("--data", help="windows file to evaluate on (default: config data source)")
        p.add_argument("--phi", help="comma-separated phi grid override")

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of every op and a small network")
    p_grad.add_argument("--seed", type=int, default=0)

    p_synth = sub.add_parser("synth-data", help="generate a synthetic windows file")
    p_synth.add_argument("--config", help="path to a flat key = value config file")
    p_synth.add_argument("--out", required=True, help="output windows file path")
    p_synth.add_argument("--seed", type=int, help="override data.seed")
    return parser


def _load_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return RunConfig()


def _build_dataset(cfg: RunConfig) -> WindowedDataset:
    source = cfg["data.source"]
    if source == "synthetic":
        return generate_synthetic(
            num_classes=cfg["data.num_classes"],
            channels=cfg["data.channels"],
            length=cfg["data.length"],
            per_class=cfg["data.per_class"],
            groups=cfg["data.groups"],
            seed=cfg["data.seed"],
            noise_std=cfg["data.noise_std"],
        )
    if not cfg["data.path"]:
        raise ConfigError(f"config key 'data.path': required when data.source is {source!r}")
    if source == "windows":
        return load_windows_file(cfg["data.path"])
    meta = DatasetMeta(
        num_classes=cfg["data.num_classes"],
        channels=cfg["data.channels"],
        window_length=cfg["data.length"],
    )
    return load_csv(cfg["data.path"], meta)


def _split(cfg: RunConfig, dataset: WindowedDataset):
    frac = cfg["data.train_fraction"]
    if not 0.0 < frac <= 1.0:
        raise ConfigError(f"config key 'data.train_fraction': must be in (0, 1], got {frac}")
    if frac == 1.0:
        return dataset, None
    return group_split(dataset, SplitSpec(train_fraction=frac, seed=cfg["data.split_seed"]))


def _write_echo(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_echo.cfg"), "w", newline="") as f:
        f.write(cfg.echo_text())


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.seed is not None:
        cfg.set("train.seed", str(args.seed))
    dataset = _build_dataset(cfg)
    train_ds, _ = _split(cfg, dataset)
    means = None
    if cfg["data.normalize"]:
        means = channel_means(train_ds)
        train_ds = apply_channel_means(train_ds, means)
    model_cfg = cfg.model_config(
        channels_in=train_ds.meta.channels,
        length_in=train_ds.meta.window_length,
        num_classes=train_ds.meta.num_classes,
    )
    net, report = train(train_ds, model_cfg, cfg.train_config())
    _write_echo(cfg, args.out)
    ckpt_path = os.path.join(args.out, "checkpoint.cetm")
    extra = {"channel_means": [float(m) for m in means]} if means is not None else None
    save_checkpoint(net, ckpt_path, class_names=train_ds.meta.class_names, extra_meta=extra)
    report_path = os.path.join(args.out, "train_report.csv")
    report.save(report_path)
    last = report.rows[-1]
    print(f"wrote {ckpt_path}")
    print(f"wrote {report_path}")
    if last.train_accuracy is not None:
        accs = " ".join(f"exit{e + 1}={a:.4f}" for e, a in enumerate(last.train_accuracy))
        print(f"final train accuracy: {accs}")
    return 0


def _parse_phi(text: str) -> tuple[float, ...]:
    try:
        grid = tuple(float(x.strip()) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"--phi: {exc}") from exc
    if not grid:
        raise ConfigError("--phi: empty grid")
    return grid


def _cmd_eval(args, dense_default: bool) -> int:
    cfg = _load_run_config(args)
    if args.seed is not None:
        cfg.set("train.seed", str(args.seed))
    net, meta = load_checkpoint(args.checkpoint)
    if args.data:
        dataset = load_windows_file(args.data)
    else:
        full = _build_dataset(cfg)
        _, test_ds = _split(cfg, full)
        dataset = test_ds if test_ds is not None else full
    if cfg["data.normalize"] and meta.get("channel_means") is not None:
        dataset = apply_channel_means(dataset, np.asarray(meta["channel_means"]))
    if args.phi:
        grid = _parse_phi(args.phi)
    elif dense_default:
        grid = tuple(np.linspace(0.0, 1.0, 101))
    else:
        grid = cfg.phi_grid()
    bundle = evaluate(net, dataset, grid)
    _write_echo(cfg, args.out)
    class_names = meta.get("class_names") or dataset.meta.class_names
    paths = emit_reports(bundle.sweep, bundle.confidence, args.out, class_names=class_names)
    per_exit_path = os.path.join(args.out, "per_exit_metrics.csv")
    with open(per_exit_path, "w", newline="") as f:
        f.write("exit,accuracy,macro_f1,kappa\n")
        for row in bundle.per_exit:
            f.write(
                f"{row['exit']},{row['accuracy']!r},{row['macro_f1']!r},{row['kappa']!r}\n"
            )
    paths.append(per_exit_path)
    for p in paths:
        print(f"wrote {p}")
    return 0


def run_gradcheck(seed: int = 0) -> tuple[bool, list[str]]:
    """Finite-difference checks for every differentiable op plus a small
    3-block multi-exit network; returns (all_passed, report_lines)."""
    from .objectives import LossConfig, total_loss

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    lines = []
    ok = True

    def check(name, op_fn, tensors, tol=1e-4):
        nonlocal ok
        # weight the output elementwise before squaring: a plain sum of
        # squares is constant in x for normalization ops (sum xhat^2 == m)
        probe = op_fn()
        r = Tensor(rng.uniform(0.5, 1.5, probe.shape), dtype=np.float64)

        def loss():
            t = op_fn() * r
            return (t * t).sum()

        result = ops.grad_check(loss, tensors, tol=tol)
        ok = ok and result.ok
        status = "pass" if result.ok else "FAIL"
        lines.append(f"{name}: max rel err {result.max_rel_err:.3e} {status}")

    def t(shape, scale=1.0):
        return Tensor(rng.normal(0.0, scale, shape), requires_grad=True, dtype=np.float64)

    x = t((2, 3, 16))
    w = t((4, 3, 5), scale=0.5)
    b = t((4,))
    check("conv1d", lambda: ops.conv1d(x, w, b), [("x", x), ("w", w), ("b", b)])

    # well-separated values keep the pooling argmax stable under +-h
    xp_data = rng.permutation(np.arange(2 * 2 * 13, dtype=np.float64)).reshape(2, 2, 13)
    xp = Tensor(xp_data, requires_grad=True, dtype=np.float64)
    check("max_pool1d", lambda: ops.max_pool1d(xp, 4, 4), [("x", xp)])

    xn = t((2, 3, 10))
    gain = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True, dtype=np.float64)
    shift = t((3,))
    check(
        "instance_norm",
        lambda: ops.instance_norm(xn, gain, shift),
        [("x", xn), ("gain", gain), ("shift", shift)],
    )
    check(
        "layer_norm",
        lambda: ops.layer_norm(xn, gain, shift),
        [("x", xn), ("gain", gain), ("shift", shift)],
    )

    xa = t((2, 3, 8))
    slopes = Tensor(rng.uniform(0.1, 0.4, 3), requires_grad=True, dtype=np.float64)
    check("prelu", lambda: ops.prelu(xa, slopes, axis=-2), [("x", xa), ("slopes", slopes)])

    xd = t((4, 6))
    wd = t((3, 6), scale=0.5)
    bd = t((3,))
    check("dense", lambda: ops.dense(xd, wd, bd), [("x", xd), ("w", wd), ("b", bd)])

    xg = t((2, 5, 9))
    check("global_avg_pool", lambda: ops.global_avg_pool(xg), [("x", xg)])

    xdr = t((3, 8))
    check(
        "dropout",
        lambda: ops.dropout(xdr, 0.3, training=True, rng=np.random.Generator(np.random.PCG64(7))),
        [("x", xdr)],
    )

    xce = t((5, 4))
    targets = rng.dirichlet(np.ones(4), 5)
    weights = rng.uniform(0.0, 1.0, 5)
    check(
        "cross_entropy_with_logits",
        lambda: ops.cross_entropy_with_logits(xce, targets, weights=weights),
        [("logits", xce)],
    )

    full_cfg = default_model_config(channels_in=2, length_in=32, num_classes=3, seed=seed, dropout=0.0)
    small_cfg = type(full_cfg)(
        channels_in=2,
        length_in=32,
        num_classes=3,
        blocks=full_cfg.blocks[:3],
        head=full_cfg.head,
        l2_rate=1e-4,
        seed=seed,
    )
    net3 = build_network(small_cfg, dtype=np.float64)
    xb = rng.normal(0.0, 1.0, (4, 2, 32))
    yb = rng.integers(0, 3, 4)
    loss_cfg = LossConfig(mode="cet")

    def net_loss():
        clean = net3.forward_all_exits(Tensor(xb, dtype=np.float64))
        pert = net3.forward_all_exits(Tensor(xb + 0.1, dtype=np.float64))
        return total_loss(clean, pert, yb, loss_cfg, net3.l2_penalty(), kappa=0.2).total

    check("multiexit_net", net_loss, net3.parameters())
    return ok, lines



def _cmd_gradcheck(args) -> int:
    ok, lines = run_gradcheck(args.seed)
    for line in lines:
        print(line)
    if not ok:
        print("error: gradient check failed", file=sys.stderr)
        return 1
    return 0


def _cmd_synth_data(args) -> int:
    cfg = _load_run_config(args)
    if args.seed is not None:
        cfg.set("data.seed", str(args.seed))
    dataset = generate_synthetic(
        num_classes=cfg["data.num_classes"],
        channels=cfg["data.channels"],
        length=cfg["data.length"],
        per_class=cfg["data.per_class"],
        groups=cfg["data.groups"],
        seed=cfg["data.seed"],
        noise_std=cfg["data.noise_std"],
    )
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    save_windows_file(dataset, args.out)
    print(f"wrote {args.out} ({len(dataset)} windows)")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args, dense_default=False)
        if args.command == "sweep":
            return _cmd_eval(args, dense_default=True)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "synth-data":
            return _cmd_synth_data(args)
        raise ValueError(f"unknown command {args.command!r}")
    except (ConfigError, DataFileError, CheckpointError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
