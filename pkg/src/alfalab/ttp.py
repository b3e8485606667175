"""Desk-scale test-time personalization protocol.

Pre-train MiniGazeNet on a labelled synthetic source population, truncate every
conv to rank ``d`` and recover, then personalize per user from a handful of
unlabelled shots with the flip-consistency loss, and compare adapters.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np

from . import gazesim
from .adapters import (
    Adapter,
    AlfaAdapter,
    alfa_delta_and_grads,
    default_sigma,
    init_alfa,
    init_lora,
)
from .decompose import decompose_layer
from .errors import ContractError
from .model import (
    CONVS,
    MiniGazeNet,
    backward_batch,
    conv_weights,
    decompose_net,
    forward_batch,
    init_minigaze,
    predict,
)
from .numerics import AdamW, make_rng

log = logging.getLogger(__name__)

# sub-stream ids passed to make_rng next to the seed
STREAM_INIT, STREAM_SOURCE, STREAM_SHUFFLE, STREAM_USER, STREAM_USER_DATA = 1, 2, 3, 4, 5
STREAM_ADAPTER, STREAM_AUGMENT, STREAM_RECOVER = 6, 7, 8

METHODS = ("none", "lora", "alfa")


@dataclass
class TrainConfig:
    seed: int = 0
    # source population and pre-training
    source_users: int = 40
    samples_per_user: int = 128
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-3
    # truncation and recovery
    svd_rank: int = 4
    recovery_epochs: int = 6
    recovery_lr: float = 2e-3
    # personalization
    adapter: str = "alfa"
    methods: str = "lora,alfa"
    heads: int = 4
    lora_rank: int = 2
    shots: int = 5
    personalize_steps: int = 50
    personalize_lr: float = 5e-5
    lr_multiplier_late_layers: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    adapted_layers: str = "conv2,conv3"
    late_layers: str = "conv3"
    augment: bool = True
    train_affine: bool = False
    scenario: str = "full-pose"
    # evaluation users
    eval_users: int = 10
    eval_samples: int = 200
    shift_margin: float = 0.5
    mirror_light: bool = True

    def __post_init__(self):
        if self.shots < 1:
            raise ContractError("shots must be >= 1")
        if self.lr <= 0 or self.personalize_lr <= 0:
            raise ContractError("learning rates must be positive")
        if self.scenario not in ("full-pose", "frontal-only"):
            raise ContractError(f"unknown scenario {self.scenario!r}")
        if self.adapter not in METHODS:
            raise ContractError(f"unknown adapter kind {self.adapter!r}")
        for m in self.method_list:
            if m not in METHODS:
                raise ContractError(f"unknown method {m!r}")

    @property
    def method_list(self) -> list[str]:
        return [m for m in self.methods.split(",") if m]

    @property
    def adapted_list(self) -> list[str]:
        return [c for c in self.adapted_layers.split(",") if c]

    @property
    def late_list(self) -> list[str]:
        return [c for c in self.late_layers.split(",") if c]

    def with_(self, **kw) -> "TrainConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return TrainConfig(**vals)


# --------------------------------------------------------------------------- data


def source_population(cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for u in range(cfg.source_users):
        rng = make_rng(cfg.seed, STREAM_SOURCE, u)
        prof = gazesim.source_profile(u, rng)
        x, y = gazesim.stack(gazesim.user_samples(prof, cfg.samples_per_user, rng))
        images.append(x)
        labels.append(y)
    if not images:
        return np.zeros((0, 32, 32)), np.zeros((0, 2))
    return np.concatenate(images), np.concatenate(labels)


@dataclass
class UserData:
    profile: gazesim.UserProfile
    shots: list[gazesim.GazeSample]
    test: list[gazesim.GazeSample]


def target_user(cfg: TrainConfig, user_id: int) -> UserData:
    """A shifted user; the first ``cfg.shots`` samples are the personalization shots."""
    prof = gazesim.shifted_profile(
        user_id, make_rng(cfg.seed, STREAM_USER, user_id), cfg.shift_margin, cfg.mirror_light
    )
    rng = make_rng(cfg.seed, STREAM_USER_DATA, user_id)
    frontal = cfg.shots if cfg.scenario == "frontal-only" else 0
    samples = gazesim.user_samples(prof, cfg.shots + cfg.eval_samples, rng, frontal_first=frontal)
    return UserData(prof, samples[: cfg.shots], samples[cfg.shots :])


# --------------------------------------------------------------------------- training


def l1_loss(pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    n = len(pred)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def dataset_l1(net: MiniGazeNet, images, labels, mode="base", adapters=None) -> float:
    return l1_loss(predict(net, images, mode, adapters), labels)[0]


def mean_angular_error(net, images, labels, mode="base", adapters=None) -> float:
    return float(gazesim.angular_errors(labels, predict(net, images, mode, adapters)).mean())


@dataclass
class PretrainResult:
    net: MiniGazeNet
    loss_curve: list[float]


def pretrain(cfg: TrainConfig, images: np.ndarray, labels: np.ndarray) -> PretrainResult:
    """Supervised L1 training of a fresh net with Adam.

    ``loss_curve[0]`` is the dataset loss at initialization, followed by the
    mean mini-batch loss of each epoch.
    """
    if len(images) == 0:
        raise ContractError("source dataset is empty")
    net = init_minigaze(make_rng(cfg.seed, STREAM_INIT))
    curve = [dataset_l1(net, images, labels)]
    opt = AdamW(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    shuffle = make_rng(cfg.seed, STREAM_SHUFFLE)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(images))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            ws = conv_weights(net)
            out, cache = forward_batch(net, images[idx], ws)
            loss, dout = l1_loss(out, labels[idx])
            total += loss * len(idx)
            grads = backward_batch(net, cache, ws, dout)
            opt.step(net.weights, grads)
        curve.append(total / len(images))
        log.info("pretrain epoch %d: L1 %.5f", epoch + 1, curve[-1])
    return PretrainResult(net, curve)


@dataclass
class RecoveryRecord:
    warnings: list[str]
    error_full: float
    error_truncated: float
    error_recovered: float
    loss_curve: list[float] = field(default_factory=list)


def truncate_and_recover(
    net: MiniGazeNet, d: int, cfg: TrainConfig, images: np.ndarray, labels: np.ndarray
) -> tuple[MiniGazeNet, RecoveryRecord]:
    """Factor every conv at rank ``d``, then fine-tune factors and the rest.

    After recovery each layer is re-factored from its product so ``U`` is
    orthonormal again; with zero recovery epochs the raw SVD factors are kept.
    """
    err_full = mean_angular_error(net, images, labels)
    dec, warnings = decompose_net(net, d)
    for w in warnings:
        log.warning(w)
    err_trunc = mean_angular_error(dec, images, labels)
    curve = [dataset_l1(dec, images, labels)]
    if cfg.recovery_epochs > 0:
        params = {k: v.copy() for k, v in dec.weights.items()}
        for c, f in dec.factors.items():
            params[f"{c}.U"] = f.U.copy()
            params[f"{c}.V"] = f.Vbase.copy()
        opt = AdamW(lr=cfg.recovery_lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        shuffle = make_rng(cfg.seed, STREAM_RECOVER)
        work = MiniGazeNet(params)
        for _ in range(cfg.recovery_epochs):
            order = shuffle.permutation(len(images))
            total = 0.0
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                ws = {c: params[f"{c}.U"] @ params[f"{c}.V"] for c in CONVS}
                out, cache = forward_batch(work, images[idx], ws)
                loss, dout = l1_loss(out, labels[idx])
                total += loss * len(idx)
                g = backward_batch(work, cache, ws, dout)
                for c in CONVS:
                    gw = g.pop(c)
                    g[f"{c}.U"] = gw @ params[f"{c}.V"].T
                    g[f"{c}.V"] = params[f"{c}.U"].T @ gw
                opt.step(params, g)
            curve.append(total / len(images))
        factors = {}
        for c in CONVS:
            rank = dec.factors[c].d
            factors[c] = decompose_layer(params[f"{c}.U"] @ params[f"{c}.V"], rank, c)
        dec = MiniGazeNet({k: params[k].copy() for k in dec.weights}, factors)
    err_rec = mean_angular_error(dec, images, labels)
    return dec, RecoveryRecord(warnings, err_full, err_trunc, err_rec, curve)


# --------------------------------------------------------------------------- personalization


def init_adapters(net: MiniGazeNet, cfg: TrainConfig, kind: str, rng) -> dict[str, Adapter]:
    adapters: dict[str, Adapter] = {}
    if kind == "none":
        return adapters
    for c in cfg.adapted_list:
        base = net.factors[c]
        if kind == "alfa":
            adapters[c] = init_alfa(base.d, base.n, cfg.heads, cfg.lora_rank, None, rng)
        else:
            adapters[c] = init_lora(base.m, base.n, cfg.lora_rank, default_sigma(base.d), rng)
    return adapters


def adapter_grads(
    net: MiniGazeNet, adapters: Mapping[str, Adapter], weight_grads: Mapping[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Chain dLoss/dW of every adapted conv into its adapter's parameters."""
    out = {}
    for c, ad in adapters.items():
        gw = weight_grads[c]
        base = net.factors[c]
        if isinstance(ad, AlfaAdapter):
            g = alfa_delta_and_grads(ad, base, base.U.T @ gw)
        else:
            g = {"a": gw @ ad.B.T, "b": ad.A.T @ gw}
        out.update({f"{c}/{k}": v for k, v in g.items()})
    return out


def symmetry_objective(net, images, mode="adapted", adapters=None):
    """Flip-consistency loss on ``images`` plus everything needed for backprop."""
    both = np.concatenate([images, gazesim.flip_image(images)])
    ws = conv_weights(net, mode, adapters)
    out, cache = forward_batch(net, both, ws)
    n = len(images)
    loss, g, g_flip = gazesim.symmetry_loss_batch(out[:n], out[n:])
    return loss, np.concatenate([g, g_flip]), ws, cache


def shot_images(cfg: TrainConfig, shots: np.ndarray, user_id: int = 0) -> np.ndarray:
    if cfg.augment:
        return gazesim.augment(shots, make_rng(cfg.seed, STREAM_AUGMENT, user_id))
    return shots


@dataclass
class PersonalizeResult:
    adapters: dict[str, Adapter]
    loss_trace: list[float]
    affine: dict[str, np.ndarray] = field(default_factory=dict)


def personalize(
    net: MiniGazeNet,
    shots: np.ndarray,
    cfg: TrainConfig,
    kind: str | None = None,
    user_id: int = 0,
) -> PersonalizeResult:
    """Train fresh adapters on unlabelled shots; base factors are never touched.

    ``loss_trace`` has ``personalize_steps + 1`` entries: the loss before each
    step and the loss after the last one.
    """
    kind = cfg.adapter if kind is None else kind
    shots = np.asarray(shots, dtype=np.float64)
    if len(shots) == 0:
        raise ContractError("personalization needs at least one shot")
    if len(shots) != cfg.shots:
        raise ContractError(f"expected {cfg.shots} shots, got {len(shots)}")
    adapters = init_adapters(net, cfg, kind, make_rng(cfg.seed, STREAM_ADAPTER, user_id))
    images = shot_images(cfg, shots, user_id)
    if not adapters:
        loss = symmetry_objective(net, images, "base")[0]
        return PersonalizeResult({}, [loss])
    params = {f"{c}/{k}": v for c, ad in adapters.items() for k, v in ad.params.items()}
    scale = {
        name: cfg.lr_multiplier_late_layers
        for name in params
        if name.split("/")[0] in cfg.late_list
    }
    work = net
    if cfg.train_affine:
        work = net.copy()
        for c in cfg.adapted_list:
            for k in (f"{c}.scale", f"{c}.bias"):
                params[k] = work.weights[k]
                if c in cfg.late_list:
                    scale[k] = cfg.lr_multiplier_late_layers
    opt = AdamW(
        lr=cfg.personalize_lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
        lr_scale=scale,
    )
    trace = []
    for _ in range(cfg.personalize_steps):
        _sync(adapters, params, work)
        loss, dout, ws, cache = symmetry_objective(work, images, "adapted", adapters)
        trace.append(loss)
        wg = backward_batch(work, cache, ws, dout)
        grads = adapter_grads(work, adapters, wg)
        if cfg.train_affine:
            grads.update({k: wg[k] for k in params if "/" not in k})
        opt.step(params, grads)
    _sync(adapters, params, work)
    trace.append(symmetry_objective(work, images, "adapted", adapters)[0])
    affine = {k: v for k, v in params.items() if "/" not in k}
    return PersonalizeResult(adapters, trace, affine)


def _sync(adapters, params, work):
    for name, v in params.items():
        if "/" in name:
            c, k = name.split("/")
            adapters[c].params[k] = v
        else:
            work.weights[name] = v


def apply_affine(net: MiniGazeNet, res: PersonalizeResult) -> MiniGazeNet:
    if not res.affine:
        return net
    out = net.copy()
    out.weights.update({k: v.copy() for k, v in res.affine.items()})
    return out


# --------------------------------------------------------------------------- benchmark

REPORT_COLUMNS = (
    "user_id",
    "method",
    "pre_error_deg",
    "post_error_deg",
    "merged_error_deg",
    "sym_loss_initial",
    "sym_loss_final",
    "tuned_params",
)


@dataclass
class BenchmarkRow:
    user_id: int
    method: str
    pre_error_deg: float
    post_error_deg: float
    merged_error_deg: float
    sym_loss_initial: float
    sym_loss_final: float
    tuned_params: int


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow]
    accounting: dict[str, int]
    seed: int
    wall_clock_s: float = 0.0
    loss_traces: dict[tuple[int, str], list[float]] = field(default_factory=dict)
    recovery: RecoveryRecord | None = None

    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def mean(self, method: str, column: str) -> float:
        vals = [getattr(r, column) for r in self.rows if r.method == method]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        for r in sorted(self.rows, key=lambda r: (r.user_id, METHODS.index(r.method))):
            lines.append(
                f"{r.user_id},{r.method},{r.pre_error_deg:.9f},{r.post_error_deg:.9f},"
                f"{r.merged_error_deg:.9f},{r.sym_loss_initial:.9f},{r.sym_loss_final:.9f},"
                f"{r.tuned_params}"
            )
        return "\n".join(lines) + "\n"

    def summary(self, timing: bool = True) -> str:
        """Plain-text digest; ``timing=False`` drops the wall clock for reproducible files."""
        out = [f"seed: {self.seed}", f"users: {len({r.user_id for r in self.rows})}"]
        if self.recovery is not None:
            rec = self.recovery
            out.append(
                f"source error: full {rec.error_full:.4f} deg, truncated "
                f"{rec.error_truncated:.4f} deg, recovered {rec.error_recovered:.4f} deg"
            )
        out.append("method  mean_pre_deg  mean_post_deg  change")
        for m in self.methods():
            pre, post = self.mean(m, "pre_error_deg"), self.mean(m, "post_error_deg")
            out.append(f"{m:<6}  {pre:12.4f}  {post:13.4f}  {100 * (post - pre) / pre:+6.2f}%")
        out.append("parameters:")
        out.extend(f"  {k}: {v}" for k, v in self.accounting.items())
        if timing:
            out.append(f"wall clock: {self.wall_clock_s:.1f} s")
        return "\n".join(out) + "\n"


def prepare_base(cfg: TrainConfig):
    images, labels = source_population(cfg)
    pre = pretrain(cfg, images, labels)
    dec, rec = truncate_and_recover(pre.net, cfg.svd_rank, cfg, images, labels)
    return pre, dec, rec


def evaluate_user(net, user: UserData, method: str, cfg: TrainConfig) -> tuple[BenchmarkRow, list]:
    test_x, test_y = gazesim.stack(user.test)
    shots_x, _ = gazesim.stack(user.shots)
    pre = mean_angular_error(net, test_x, test_y, "base")
    res = personalize(net, shots_x, cfg, method, user.profile.user_id)
    tuned = apply_affine(net, res)
    post = mean_angular_error(tuned, test_x, test_y, "adapted", res.adapters)
    merged = mean_angular_error(tuned, test_x, test_y, "merged", res.adapters)
    n_params = sum(ad.num_params() for ad in res.adapters.values())
    n_params += sum(v.size for v in res.affine.values())
    row = BenchmarkRow(
        user.profile.user_id, method, pre, post, merged, res.loss_trace[0], res.loss_trace[-1], n_params
    )
    return row, res.loss_trace


def run_benchmark(
    cfg: TrainConfig, n_users: int | None = None, net: MiniGazeNet | None = None
) -> BenchmarkReport:
    """Personalize every configured method for ``n_users`` shifted users."""
    from .accounting import desk_accounting

    n_users = cfg.eval_users if n_users is None else n_users
    if n_users < 1:
        raise ContractError("need at least one user")
    start = time.perf_counter()
    rec = None
    if net is None:
        _, net, rec = prepare_base(cfg)
    rows, traces = [], {}
    for u in range(n_users):
        user = target_user(cfg, u)
        for method in cfg.method_list:
            row, trace = evaluate_user(net, user, method, cfg)
            rows.append(row)
            traces[(u, method)] = trace
    rows.sort(key=lambda r: (r.user_id, METHODS.index(r.method)))
    report = BenchmarkReport(rows, desk_accounting(cfg), cfg.seed, loss_traces=traces, recovery=rec)
    report.wall_clock_s = time.perf_counter() - start
    return report
