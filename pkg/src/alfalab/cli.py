"""Command-line entry point: ``alfalab <command> ...``.

Exit codes: 0 ok, 2 bad/missing config or usage, 3 unwritable output,
4 corrupt or unreadable ATF1 file, 5 shape mismatch between files,
6 layer/slice/head index out of range.

Environment: ``ALFA_SEED`` replaces the config seed unless ``--seed`` is
given; ``ALFA_OUT_DIR`` is prepended to relative output paths.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gazesim
from .accounting import format_table, param_table
from .adapters import head_topk_mass
from .checkpoint import (
    adapter_tensors,
    affine_from_tensors,
    adapters_from_tensors,
    bind_adapters,
    net_from_tensors,
    net_tensors,
)
from .config import emit_config, load_config
from .decompose import DecomposedLayer, rank_slice
from .errors import ConfigError, FormatError, ShapeError, SliceIndexError
from .fileio import (
    load_atf,
    matrix_csv,
    minmax_normalize,
    read_pgm,
    save_atf,
    write_pgm,
    write_text,
)
from .model import CONVS, conv2d, conv_input, merge_net
from .ttp import (
    TrainConfig,
    mean_angular_error,
    personalize,
    pretrain,
    run_benchmark,
    source_population,
    target_user,
    truncate_and_recover,
)

EXIT_CONFIG, EXIT_WRITE, EXIT_FORMAT, EXIT_SHAPE, EXIT_RANGE = 2, 3, 4, 5, 6

log = logging.getLogger("alfalab")


class OutputError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _config(args) -> TrainConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = load_config(path)
    else:
        cfg = TrainConfig()
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get("ALFA_SEED"):
        try:
            seed = int(os.environ["ALFA_SEED"])
        except ValueError as exc:
            raise ConfigError(f"ALFA_SEED is not an integer: {os.environ['ALFA_SEED']!r}") from exc
    return cfg.with_(seed=seed) if seed is not None else cfg


def _out(path: str) -> Path:
    p = Path(path)
    base = os.environ.get("ALFA_OUT_DIR")
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _out_dir(path: str) -> Path:
    p = _out(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {p}: {exc}") from exc
    return p


def _write(path: Path, text: str) -> None:
    try:
        write_text(path, text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def _save(path: Path, tensors) -> None:
    try:
        save_atf(path, tensors)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def _load(path: str) -> dict:
    try:
        return load_atf(path)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def _load_net(path: str):
    return net_from_tensors(_load(path))


def _load_adapters(path: str, net=None):
    adapters, vbases = adapters_from_tensors(_load(path))
    if net is not None:
        bind_adapters(adapters, net)
    return adapters, vbases


def _with_affine(net, path: str):
    """Copy of ``net`` carrying any affine parameters tuned alongside the adapters."""
    affine = affine_from_tensors(_load(path))
    for k, v in affine.items():
        if k not in net.weights or net.weights[k].shape != v.shape:
            raise ShapeError(f"affine tensor {k!r} does not fit the net")
    if not affine:
        return net
    out = net.copy()
    out.weights.update(affine)
    return out


def _series_csv(header: str, values) -> str:
    return header + "\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(values))


# --------------------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    images, labels = source_population(cfg)
    res = pretrain(cfg, images, labels)
    dec, rec = truncate_and_recover(res.net, cfg.svd_rank, cfg, images, labels)
    _save(out / "weights.atf", net_tensors(res.net))
    _save(out / "factors.atf", net_tensors(dec))
    _write(out / "pretrain_log.csv", _series_csv("epoch,l1_loss", res.loss_curve))
    _write(out / "recovery_log.csv", _series_csv("epoch,l1_loss", rec.loss_curve))
    _write(
        out / "recovery.csv",
        "error_full_deg,error_truncated_deg,error_recovered_deg\n"
        f"{rec.error_full!r},{rec.error_truncated!r},{rec.error_recovered!r}\n",
    )
    _write(out / "config.txt", emit_config(cfg))
    for w in rec.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {out}/weights.atf and {out}/factors.atf")
    return 0


def cmd_personalize(args) -> int:
    cfg = _config(args)
    net = _load_net(args.factors)
    kind = args.kind or cfg.adapter
    missing = [c for c in cfg.adapted_list if c not in net.factors] if kind != "none" else []
    if missing:
        raise ShapeError(f"layers {missing} are not factored in {args.factors}")
    user = target_user(cfg, args.user)
    shots, _ = gazesim.stack(user.shots)
    res = personalize(net, shots, cfg, kind, args.user)
    out = _out_dir(args.out)
    _save(out / "adapter.atf", adapter_tensors(res.adapters, net, res.affine))
    _write(out / "loss_trace.csv", _series_csv("step,sym_loss", res.loss_trace))
    print(f"user {args.user}: symmetry loss {res.loss_trace[0]:.6f} -> {res.loss_trace[-1]:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    net = _load_net(args.factors)
    adapters = {}
    if args.adapter:
        adapters, _ = _load_adapters(args.adapter, net)
        net = _with_affine(net, args.adapter)
    mode = "merged" if args.merged else "adapted"
    users = [args.user] if args.user is not None else list(range(args.users or cfg.eval_users))
    lines = ["user_id,samples,error_deg"]
    for u in users:
        x, y = gazesim.stack(target_user(cfg, u).test)
        err = mean_angular_error(net, x, y, mode, adapters)
        lines.append(f"{u},{len(y)},{err:.9f}")
    _write(_out(args.out), "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_merge(args) -> int:
    net = _load_net(args.factors)
    adapters, _ = _load_adapters(args.adapter, net)
    net = _with_affine(net, args.adapter)
    _save(_out(args.out), net_tensors(merge_net(net, adapters)))
    return 0


def cmd_count_params(args) -> int:
    layers = args.layers
    rows = param_table(args.arch, args.svd_rank, args.lora_rank, args.heads, layers)
    print(format_table(rows), end="")
    return 0


def cmd_inspect_slice(args) -> int:
    net = _load_net(args.weights)
    if args.layer not in CONVS:
        raise SliceIndexError(f"unknown layer {args.layer!r}; choose from {', '.join(CONVS)}")
    if args.layer not in net.factors:
        raise ShapeError(f"layer {args.layer!r} is not factored in {args.weights}")
    layer: DecomposedLayer = net.factors[args.layer]
    w = rank_slice(layer, args.slice)
    image = read_pgm(args.image)
    x = conv_input(net, image[None], args.layer)
    act = conv2d(x, w, 3, 1)[0][0].sum(axis=0)
    prefix = _out(args.out)
    try:
        write_pgm(prefix.with_suffix(".pgm"), minmax_normalize(act))
    except OSError as exc:
        raise OutputError(str(exc)) from exc
    _write(prefix.with_suffix(".csv"), matrix_csv(act))
    return 0


def cmd_inspect_heads(args) -> int:
    adapters, vbases = _load_adapters(args.adapter)
    layer = args.layer or next(iter(adapters), None)
    if layer not in adapters:
        raise SliceIndexError(f"no adapter for layer {layer!r}")
    ad = adapters[layer]
    if ad.kind != "alfa":
        raise SliceIndexError(f"layer {layer!r} carries a {ad.kind} adapter, which has no heads")
    base = DecomposedLayer(layer, np.zeros((1, ad.d)), vbases[layer])
    ad.n = base.n
    top = head_topk_mass(ad, base, args.head, args.topk)
    print("rank,slice,attention_mass")
    for i, (s, mass) in enumerate(top):
        print(f"{i},{s},{mass:.9f}")
    return 0


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    report = run_benchmark(cfg, args.users)
    out = _out_dir(args.out)
    _write(out / "report.csv", report.to_csv())
    _write(out / "summary.txt", report.summary(timing=False))
    trace_lines = ["user_id,method,step,sym_loss"]
    for (u, m), tr in sorted(report.loss_traces.items()):
        trace_lines += [f"{u},{m},{i},{v!r}" for i, v in enumerate(tr)]
    _write(out / "loss_traces.csv", "\n".join(trace_lines) + "\n")
    print(report.summary(), end="")
    return 0


def cmd_export_samples(args) -> int:
    cfg = _config(args)
    user = target_user(cfg, args.user)
    out = _out_dir(args.out)
    samples = (user.shots + user.test)[: args.count]
    lines = ["user_id,index,yaw,pitch"]
    for s in samples:
        try:
            write_pgm(out / f"user{s.user_id:03d}_{s.index:04d}.pgm", s.image)
        except OSError as exc:
            raise OutputError(str(exc)) from exc
        lines.append(f"{s.user_id},{s.index},{s.yaw!r},{s.pitch!r}")
    _write(out / "labels.csv", "\n".join(lines) + "\n")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alfalab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="pre-train, truncate and recover the gaze net")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("personalize", help="train adapters for one synthetic user")
    s.add_argument("--config")
    s.add_argument("--factors", required=True)
    s.add_argument("--user", type=int, default=0)
    s.add_argument("--kind", choices=("none", "lora", "alfa"))
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_personalize)

    s = sub.add_parser("evaluate", help="per-user angular error CSV")
    s.add_argument("--config")
    s.add_argument("--factors", required=True)
    s.add_argument("--adapter")
    s.add_argument("--merged", action="store_true", help="evaluate through merged weights")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--user", type=int)
    g.add_argument("--users", type=int)
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("merge", help="fold an adapter into the factors")
    s.add_argument("--factors", required=True)
    s.add_argument("--adapter", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("count-params", help="Train/Tuned/Test parameter counts")
    s.add_argument("--arch", choices=("resnet18", "minigaze"), default="resnet18")
    s.add_argument("--svd-rank", type=int, default=64)
    s.add_argument("--lora-rank", type=int, default=8)
    s.add_argument("--heads", type=int, default=16)
    s.add_argument("--layers", type=int, help="number of adapted layers (default: all but the stem)")
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("inspect-slice", help="activation map of one rank slice")
    s.add_argument("--weights", required=True, help="factored net ATF1")
    s.add_argument("--layer", required=True)
    s.add_argument("--slice", type=int, required=True)
    s.add_argument("--image", required=True, help="32x32 P5 PGM")
    s.add_argument("--out", required=True, help="output prefix; writes .pgm and .csv")
    s.set_defaults(func=cmd_inspect_slice)

    s = sub.add_parser("inspect-heads", help="top-k rank slices of one attention head")
    s.add_argument("--adapter", required=True)
    s.add_argument("--layer")
    s.add_argument("--head", type=int, required=True)
    s.add_argument("--topk", type=int, default=10)
    s.set_defaults(func=cmd_inspect_heads)

    s = sub.add_parser("benchmark", help="none/LoRA/Alfa comparison over shifted users")
    s.add_argument("--config")
    s.add_argument("--users", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("export-samples", help="write one user's images as PGM plus labels.csv")
    s.add_argument("--config")
    s.add_argument("--user", type=int, default=0)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_export_samples)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_WRITE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except SliceIndexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RANGE


if __name__ == "__main__":
    sys.exit(main())
