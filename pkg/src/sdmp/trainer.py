"""Pretraining loop: view construction, mixing injection, loss assembly, AdamW, EMA."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .augment import augment, local_view
from .config import RunConfig
from .data import Dataset, generate_synthetic, load_cifar10, normalize
from .mixing import (
    MixedBatch,
    compute_lambda_c,
    mix_views,
    pairing,
    paste_boxes,
    resizemix,
    mixup,
    select_strategy,
    MIXUP,
    CUTMIX,
)
from .models import (
    DISTILLATION,
    PREDICTION,
    PROJECTION,
    EncoderParams,
    ForwardCounter,
    TeacherState,
    ema_update,
    encoder_forward,
    init_params,
    make_teacher,
)

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    student: EncoderParams
    teacher: TeacherState
    adam_m: dict
    adam_v: dict
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    forward_counter: ForwardCounter = field(default_factory=ForwardCounter)
    last_views: "Views | None" = None


def init_state(cfg: RunConfig) -> TrainState:
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    student = init_params(int(seeds[0].generate_state(1)[0]), cfg.topology(), dtype=cfg.np_dtype)
    center_dim = cfg.out_dim if cfg.framework == "distillation" else None
    teacher = make_teacher(student, cfg.momentum, center_dim)
    zeros = {k: np.zeros_like(t.data) for k, t in student}
    return TrainState(
        student=student,
        teacher=teacher,
        adam_m=zeros,
        adam_v={k: v.copy() for k, v in zeros.items()},
        rng=np.random.default_rng(seeds[1]),
    )


def steps_per_epoch(n_train: int, cfg: RunConfig) -> int:
    spe = n_train // cfg.batch_size
    if spe < 1:
        raise TrainingError(f"dataset of {n_train} samples is smaller than one batch of {cfg.batch_size}")
    return spe


def lr_at(step: int, cfg: RunConfig, spe: int) -> float:
    """Linear warmup to ``base_lr * batch / 256``, then cosine decay reaching 0 at the last step."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    total = cfg.epochs * spe
    warmup = min(cfg.warmup_epochs * spe, total - 1)
    peak = cfg.peak_lr
    if step < warmup:
        return peak * step / warmup
    span = total - 1 - warmup
    if span <= 0:
        return 0.0 if step >= total - 1 else peak
    frac = min((step - warmup) / span, 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


# --------------------------------------------------------------------------
# views


@dataclass
class Views:
    """One step's inputs.

    Contrastive: ``a`` feeds the query encoder and ``b`` the key encoder;
    ``mixed_query`` mixes ``a`` and ``mixed_key`` mixes ``b`` with the same
    coefficients. Distillation: ``a``/``b`` are the two global views,
    ``mixed_key`` is the mixed global view for the teacher, and the student
    sees ``local_clean`` plus ``local_mixed``.
    """

    a: np.ndarray
    b: np.ndarray
    mixed_query: np.ndarray | None = None
    mixed_key: np.ndarray | None = None
    local_clean: list = field(default_factory=list)
    local_mixed: list = field(default_factory=list)
    mixed_global: bool = False
    lambdas: np.ndarray | None = None
    lambda_c: np.ndarray | None = None
    pair_of: np.ndarray | None = None
    strategy: str | None = None
    swapped: bool = False


def _remix(images: np.ndarray, like: MixedBatch, scale: int = 1) -> np.ndarray:
    """Apply the coefficients/geometry of an existing mix to another batch."""
    if like.strategy == MIXUP:
        return mixup(images, like.lambdas).images
    boxes = like.patch_boxes * scale
    if like.strategy == CUTMIX:
        return paste_boxes(images, boxes)
    return resizemix(images, None, boxes=boxes).images


def n_mixed_local(cfg: RunConfig) -> int:
    if not cfg.mixing:
        return 0
    return int(math.floor(cfg.n_local_views * cfg.local_mixed_fraction))


def build_views(images: np.ndarray, cfg: RunConfig, rng: np.random.Generator) -> Views:
    n = len(images)
    if n % 2:
        raise TrainingError(f"batch of {n} samples is odd; intra-batch mixing needs an even batch")
    aug = cfg.augment_config()
    x1 = augment(images, aug, rng)
    x2 = augment(images, aug, rng)
    patch_range = (cfg.patch_min, cfg.patch_max)
    if cfg.framework == "contrastive":
        v = Views(a=x1, b=x2)
        if not cfg.mixing:
            return v
        # coin flip: which clean view the mixed pair stands in for
        v.swapped = bool(rng.random() < 0.5)
        if v.swapped:
            v.a, v.b = x2, x1
        strategy = select_strategy(rng, cfg.strategies)
        mq, mk = mix_views(v.a, v.b, strategy, rng, cfg.mix_spec(strategy), patch_range)
        v.mixed_query, v.mixed_key = mq.images, mk.images
        v.lambdas, v.pair_of, v.strategy = mq.lambdas, mq.pair_of, strategy
        v.lambda_c = compute_lambda_c(mq.lambdas, mq.pair_of)
        return v

    v = Views(a=x1, b=x2)
    local_size = cfg.image_size // 2
    locals_ = [local_view(images, local_size, aug, rng) for _ in range(cfg.n_local_views)]
    n_mix = n_mixed_local(cfg)
    if not cfg.mixing:
        v.local_clean = locals_
        return v
    strategy = select_strategy(rng, cfg.strategies)
    spec = cfg.mix_spec(strategy)
    if n_mix == 0:
        # no local views to replace: the student's second global view is mixed
        mq, mk = mix_views(x1, x2, strategy, rng, spec, patch_range)
        v.local_mixed = [mq.images]
        v.mixed_global = True
        v.local_clean = locals_
    else:
        mq, mk = mix_views(locals_[0], x2, strategy, rng, spec, patch_range, prime_scale=2)
        v.local_mixed = [mq.images] + [_remix(l, mq) for l in locals_[1:n_mix]]
        v.local_clean = locals_[n_mix:]
    v.mixed_key = mk.images
    v.lambdas, v.pair_of, v.strategy = mq.lambdas, mq.pair_of, strategy
    v.lambda_c = compute_lambda_c(mq.lambdas, mq.pair_of)
    return v


# --------------------------------------------------------------------------
# losses per framework


def _prep(x: np.ndarray, cfg: RunConfig) -> np.ndarray:
    x = x.astype(cfg.np_dtype, copy=False)
    return normalize(x) if cfg.normalize else x


def contrastive_loss(state: TrainState, v: Views, cfg: RunConfig) -> tuple[T.Tensor, list]:
    S, Tp, c = state.student, state.teacher.params, state.forward_counter
    out = L.ContrastiveOutputs(
        q_a=encoder_forward(S, _prep(v.a, cfg), PREDICTION, c),
        k_b=encoder_forward(Tp, _prep(v.b, cfg), PROJECTION, c),
    )
    weights = None
    if v.mixed_query is not None:
        out.q_mix = encoder_forward(S, _prep(v.mixed_query, cfg), PREDICTION, c)
        out.k_mix = encoder_forward(Tp, _prep(v.mixed_key, cfg), PROJECTION, c)
        weights = L.LossWeights.from_lambdas(v.lambdas, v.lambda_c, v.pair_of, cfg.weight_source, cfg.weight_mix)
    if v.mixed_query is None or cfg.view_policy == "extra":
        out.q_b = encoder_forward(S, _prep(v.b, cfg), PREDICTION, c)
        out.k_a = encoder_forward(Tp, _prep(v.a, cfg), PROJECTION, c)
    groups: list = []
    loss = L.moco_total_loss(out, weights, cfg.tau, cfg.view_policy, v.pair_of, groups)
    return loss, groups


def distillation_loss(state: TrainState, v: Views, cfg: RunConfig) -> tuple[T.Tensor, np.ndarray]:
    S, teacher, c = state.student, state.teacher, state.forward_counter
    t_logits = [encoder_forward(teacher.params, _prep(x, cfg), DISTILLATION, c).data for x in (v.a, v.b)]
    p_t = [L.teacher_probs(t, teacher.center, cfg.tau_teacher) for t in t_logits]
    student_clean = [encoder_forward(S, _prep(v.a, cfg), DISTILLATION, c)]
    view_ids = [0]
    if not v.mixed_global:
        student_clean.append(encoder_forward(S, _prep(v.b, cfg), DISTILLATION, c))
        view_ids.append(1)
    student_clean += [encoder_forward(S, _prep(x, cfg), DISTILLATION, c) for x in v.local_clean]
    view_ids += [None] * len(v.local_clean)
    total = L.dino_loss(p_t, student_clean, cfg.tau_student, view_ids)
    if v.local_mixed:
        weights = L.LossWeights.from_lambdas(v.lambdas, v.lambda_c, v.pair_of, cfg.weight_source, cfg.weight_mix)
        p_mix = L.teacher_probs(
            encoder_forward(teacher.params, _prep(v.mixed_key, cfg), DISTILLATION, c).data,
            teacher.center,
            cfg.tau_teacher,
        )
        # source teachers: the global views the mixed student view was not cut from
        sources = p_t[1:] if v.mixed_global else p_t
        src_terms, mix_terms = [], []
        for x in v.local_mixed:
            s = encoder_forward(S, _prep(x, cfg), DISTILLATION, c)
            src_terms += [L.dino_source_loss(p, s, weights, cfg.tau_student, v.pair_of) for p in sources]
            mix_terms.append(L.dino_mixing_loss(p_mix, s, weights, cfg.tau_student, v.pair_of))
        total = L.dino_total_loss(total, _average(src_terms), _average(mix_terms))
    batch_center = np.concatenate(t_logits).mean(axis=0)
    return total, batch_center


def _average(terms: list) -> T.Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.scale(acc, 1.0 / len(terms))


# --------------------------------------------------------------------------
# step


def adamw_update(state: TrainState, lr: float, weight_decay: float) -> None:
    b1, b2 = ADAM_BETAS
    t = state.step + 1
    c1, c2 = 1 - b1**t, 1 - b2**t
    for name, p in state.student:
        g = p.grad
        if g is None:
            continue
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if name.endswith(".w"):
            update = update + weight_decay * p.data
        p.data = (p.data - p.dtype.type(lr) * update).astype(p.dtype, copy=False)


def train_step(state: TrainState, images: np.ndarray, cfg: RunConfig, spe: int) -> float:
    views = build_views(images, cfg, state.rng)
    state.last_views = views
    state.student.zero_grad()
    center = None
    if cfg.framework == "contrastive":
        loss, _ = contrastive_loss(state, views, cfg)
    else:
        loss, center = distillation_loss(state, views, cfg)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(_diagnostics(state, views, value))
    T.backward(loss)
    adamw_update(state, lr_at(state.step, cfg, spe), cfg.weight_decay)
    ema_update(state.teacher, state.student, cfg.momentum)
    if center is not None:
        cm = cfg.center_momentum
        state.teacher.center = cm * state.teacher.center + (1 - cm) * center
    state.step += 1
    state.loss_history.append(value)
    return value


def _diagnostics(state: TrainState, v: Views, value: float) -> str:
    parts = [f"non-finite loss {value} at step {state.step}", f"strategy={v.strategy}"]
    if v.lambdas is not None:
        parts.append(f"lambda=[{v.lambdas.min():.4f}, {v.lambdas.max():.4f}]")
        parts.append(f"lambda_c=[{v.lambda_c.min():.4f}, {v.lambda_c.max():.4f}]")
    ranges = [f"{k}: [{t.data.min():.3g}, {t.data.max():.3g}]" for k, t in state.student]
    parts.append("param ranges " + "; ".join(ranges))
    return " | ".join(parts)


# --------------------------------------------------------------------------
# full run


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "cifar10":
        train = load_cifar10(cfg.data_path, "train")
        test = load_cifar10(cfg.data_path, "test")
    else:
        train, test = generate_synthetic(cfg.synthetic_spec(), cfg.data_seed)
    if cfg.train_subset:
        idx = np.random.default_rng(cfg.data_seed).permutation(len(train))[: cfg.train_subset]
        train = train.subset(np.sort(idx))
    return train, test


def run_training(cfg: RunConfig, out_dir=None, resume: bool = True, max_epochs: int | None = None,
                 datasets: tuple | None = None) -> tuple[TrainState, list[dict]]:
    """Train for ``cfg.epochs`` epochs (or stop after ``max_epochs`` of them).

    With ``out_dir`` set, metrics and checkpoints are written there and an
    existing checkpoint is resumed from.
    """
    from . import checkpoint, evaluation, metrics

    train, test = datasets if datasets is not None else load_datasets(cfg)
    spe = steps_per_epoch(len(train), cfg)
    writer = metrics.MetricsWriter(out_dir, cfg) if out_dir is not None else None
    state = None
    if out_dir is not None and resume:
        latest = checkpoint.latest_checkpoint(out_dir)
        if latest is not None:
            state, _ = checkpoint.load_checkpoint(latest, expect_config=cfg)
            log.info("resumed from %s at epoch %d", latest, state.epoch)
    if state is None:
        state = init_state(cfg)
    if writer is not None:
        writer.truncate_after(state.epoch)
    rows = []
    t0 = time.perf_counter()
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, state.epoch + max_epochs)
    while state.epoch < stop:
        perm = state.rng.permutation(len(train))
        ep_losses = []
        for s in range(spe):
            idx = perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            ep_losses.append(train_step(state, train.images[idx], cfg, spe))
        state.epoch += 1
        row = {
            "epoch": state.epoch,
            "train_loss": float(np.mean(ep_losses)),
            "lr": lr_at(state.step - 1, cfg, spe),
            "knn_acc": None,
            "probe_acc": None,
            "wall_time_s": time.perf_counter() - t0,
        }
        last = state.epoch == cfg.epochs
        if cfg.knn_every and (state.epoch % cfg.knn_every == 0 or last):
            row["knn_acc"] = evaluation.knn_eval(state.student, train, test, cfg.knn_k)
        if cfg.probe_at_end and last:
            row["probe_acc"] = evaluation.linear_probe(
                state.student, train, test, cfg.probe_epochs, cfg.probe_lr, seed=cfg.seed
            ).top1
        log.info("epoch %d loss %.5f lr %.3g", state.epoch, row["train_loss"], row["lr"])
        rows.append(row)
        if writer is not None:
            writer.append(row)
            if last or (cfg.ckpt_every and state.epoch % cfg.ckpt_every == 0):
                checkpoint.save_checkpoint(checkpoint.checkpoint_path(out_dir, state.epoch), state, cfg)
    if writer is not None and state.epoch == cfg.epochs:
        writer.write_summary(state, rows)
    return state, rows
