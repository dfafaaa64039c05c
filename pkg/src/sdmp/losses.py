"""Source and mixing losses for contrastive and distillation pretraining.

Contrastive terms operate on L2-normalised embedding rows (autodiff tensors for
queries, constant tensors for keys). Distillation terms take teacher
probabilities as plain arrays, so the teacher side never carries gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mixing import compute_lambda_c, pairing
from .tensor import Tensor

RANDOM, STATIC = "random", "static"
REPLACE, EXTRA = "replace", "extra"


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    """Per-sample weight pairs ``(own, partner)`` for the source and mixing terms."""

    source: np.ndarray
    mix: np.ndarray
    mode_source: str = RANDOM
    mode_mix: str = RANDOM

    @classmethod
    def from_lambdas(cls, lambdas, lambda_c=None, pair_of=None,
                     mode_source: str = RANDOM, mode_mix: str = RANDOM) -> "LossWeights":
        lam = np.asarray(lambdas, dtype=np.float64)
        for mode in (mode_source, mode_mix):
            if mode not in (RANDOM, STATIC):
                raise LossError(f"unknown weight mode {mode!r}")
        if pair_of is None:
            pair_of = pairing(len(lam))
        if lambda_c is None:
            lambda_c = compute_lambda_c(lam, pair_of)
        lam_s = np.full_like(lam, 0.5) if mode_source == STATIC else lam
        lam_c = np.ones_like(lam) if mode_mix == STATIC else np.asarray(lambda_c, dtype=np.float64)
        source = np.stack([lam_s, 1.0 - lam_s], axis=1)
        mix = np.stack([1.0 / (1.0 + lam_c), lam_c / (1.0 + lam_c)], axis=1)
        return cls(source, mix, mode_source, mode_mix)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise LossError(f"temperature must be positive, got {tau}")


def _check_pair(kind: str, a: Tensor, b) -> None:
    bs = b.shape
    if a.ndim != 2 or len(bs) != 2 or a.shape != tuple(bs):
        raise T.ShapeError(f"{kind}: incompatible shapes {a.shape} and {tuple(bs)}")


def similarity_log_softmax(queries: Tensor, keys: Tensor, tau: float) -> Tensor:
    """Row-wise log-softmax of ``<q_i, k_j> / tau`` over all keys of the batch."""
    _check_tau(tau)
    logits = T.scale(T.matmul(queries, keys.T), 1.0 / tau)
    return T.log_softmax(logits, axis=1)


def info_nce_term(query: Tensor, keys: Tensor, target: int, tau: float) -> Tensor:
    _check_tau(tau)
    if not 0 <= target < keys.shape[0]:
        raise IndexError(f"target {target} out of range for {keys.shape[0]} keys")
    q = T.reshape(query, (1, -1))
    return -similarity_log_softmax(q, keys, tau)[0, target]


def _two_target_nll(logp: Tensor, w: np.ndarray, pair_of: np.ndarray) -> Tensor:
    n = logp.shape[0]
    W = np.zeros((n, n), dtype=logp.dtype)
    idx = np.arange(n)
    W[idx, idx] += w[:, 0]
    W[idx, pair_of] += w[:, 1]
    return T.scale(T.sum_(T.mul(logp, W)), -1.0 / n)


def info_nce(queries: Tensor, keys: Tensor, tau: float) -> Tensor:
    """Plain InfoNCE: query ``i`` against key ``i``, averaged over the batch."""
    _check_pair("info_nce", queries, keys)
    n = queries.shape[0]
    logp = similarity_log_softmax(queries, keys, tau)
    return T.scale(T.sum_(T.mul(logp, np.eye(n, dtype=logp.dtype))), -1.0 / n)


def moco_source_loss(y_mix: Tensor, y_keys: Tensor, weights: LossWeights, tau: float,
                     pair_of: np.ndarray | None = None) -> Tensor:
    """Mixed queries against the clean keys of both of their source images."""
    _check_pair("moco_source_loss", y_mix, y_keys)
    n = y_mix.shape[0]
    pair_of = pairing(n) if pair_of is None else pair_of
    return _two_target_nll(similarity_log_softmax(y_mix, y_keys, tau), weights.source, pair_of)


def moco_mixing_loss(y_mix: Tensor, y_mix_prime: Tensor, weights: LossWeights, tau: float,
                     pair_of: np.ndarray | None = None) -> Tensor:
    """Mixed queries against the mixed keys of their own index and of their partner."""
    _check_pair("moco_mixing_loss", y_mix, y_mix_prime)
    n = y_mix.shape[0]
    pair_of = pairing(n) if pair_of is None else pair_of
    return _two_target_nll(similarity_log_softmax(y_mix, y_mix_prime, tau), weights.mix, pair_of)


def vanilla_contrastive_loss(q1: Tensor, q2: Tensor, k1: Tensor, k2: Tensor, tau: float) -> Tensor:
    """Symmetrised two-view InfoNCE."""
    return T.add(info_nce(q1, k2, tau), info_nce(q2, k1, tau))


@dataclass
class ContrastiveOutputs:
    """Encoder outputs of one contrastive step.

    ``q_*`` come from the query encoder, ``k_*`` from the momentum encoder.
    View ``a`` is clean on the query side and view ``b`` is clean on the key
    side; the mixed query is built from view ``a`` and the mixed key from ``b``.
    ``q_b``/``k_a`` exist only for the extra-view policy or without mixing.
    """

    q_a: Tensor
    k_b: Tensor
    q_mix: Tensor | None = None
    k_mix: Tensor | None = None
    q_b: Tensor | None = None
    k_a: Tensor | None = None


def moco_total_loss(out: ContrastiveOutputs, weights: LossWeights | None, tau: float,
                    view_policy: str = REPLACE, pair_of: np.ndarray | None = None,
                    groups: list | None = None) -> Tensor:
    """Clean contrastive groups plus the mixed view's source and mixing terms.

    The mixed view stands in for one symmetric group, so its two terms share
    that group's unit weight. ``groups`` (when given) collects the names of
    the InfoNCE groups evaluated.
    """
    if view_policy not in (REPLACE, EXTRA):
        raise LossError(f"unknown view policy {view_policy!r}")
    groups = [] if groups is None else groups
    total = info_nce(out.q_a, out.k_b, tau)
    groups.append("clean_ab")
    if view_policy == EXTRA or out.q_mix is None:
        if out.q_b is None or out.k_a is None:
            raise LossError(f"{view_policy} policy needs both clean query views and both key views")
        total = T.add(total, info_nce(out.q_b, out.k_a, tau))
        groups.append("clean_ba")
    if out.q_mix is not None:
        if weights is None or out.k_mix is None:
            raise LossError("mixed query given without mixed keys or loss weights")
        src = moco_source_loss(out.q_mix, out.k_b, weights, tau, pair_of)
        mix = moco_mixing_loss(out.q_mix, out.k_mix, weights, tau, pair_of)
        groups += ["source", "mixing"]
        total = T.add(total, T.scale(T.add(src, mix), 0.5))
    return total


# --------------------------------------------------------------------------
# distillation


def teacher_probs(logits: np.ndarray, center: np.ndarray | None, tau_t: float) -> np.ndarray:
    """Centred, sharpened teacher distribution (no gradient)."""
    _check_tau(tau_t)
    z = np.asarray(logits, dtype=np.float64)
    if center is not None:
        z = z - center
    z = z / tau_t
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_distribution(p: np.ndarray) -> None:
    if (p < 0).any():
        raise LossError("teacher distribution has negative entries")
    err = np.abs(p.sum(axis=-1) - 1.0).max() if p.size else 0.0
    if err > 1e-6:
        raise LossError(f"teacher distribution rows must sum to 1 (max deviation {err:.2e})")


def soft_cross_entropy_rows(p_t: np.ndarray, s_logits: Tensor, tau_s: float) -> Tensor:
    _check_tau(tau_s)
    p_t = np.asarray(p_t)
    if p_t.shape != s_logits.shape:
        raise T.ShapeError(f"soft_cross_entropy: incompatible shapes {p_t.shape} and {s_logits.shape}")
    _check_distribution(p_t)
    logp = T.log_softmax(T.scale(s_logits, 1.0 / tau_s), axis=-1)
    return T.scale(T.sum_(T.mul(logp, p_t.astype(logp.dtype)), axis=-1), -1.0)


def soft_cross_entropy(p_t: np.ndarray, s_logits: Tensor, tau_s: float) -> Tensor:
    """Mean over rows of ``-sum_k p_t[k] log softmax(s / tau_s)[k]``."""
    return T.mean(soft_cross_entropy_rows(p_t, s_logits, tau_s))


def _mixture(p: np.ndarray, w: np.ndarray, pair_of: np.ndarray) -> np.ndarray:
    return w[:, :1] * p + w[:, 1:] * p[pair_of]


def dino_source_loss(teacher_clean: np.ndarray, student_mixed: Tensor, weights: LossWeights,
                     tau_s: float, pair_of: np.ndarray | None = None) -> Tensor:
    """Student on mixed input against the lambda-mixture of its two source teachers."""
    n = student_mixed.shape[0]
    pair_of = pairing(n) if pair_of is None else pair_of
    return soft_cross_entropy(_mixture(np.asarray(teacher_clean), weights.source, pair_of), student_mixed, tau_s)


def dino_mixing_loss(teacher_mixed: np.ndarray, student_mixed: Tensor, weights: LossWeights,
                     tau_s: float, pair_of: np.ndarray | None = None) -> Tensor:
    """Student on mixed input against the mixed-input teacher of its index and partner.

    The cross-entropy is linear in its target, so the two weighted terms are
    evaluated as one against the weighted target.
    """
    n = student_mixed.shape[0]
    pair_of = pairing(n) if pair_of is None else pair_of
    return soft_cross_entropy(_mixture(np.asarray(teacher_mixed), weights.mix, pair_of), student_mixed, tau_s)


def dino_loss(teacher_global: list[np.ndarray], student_views: list[Tensor], tau_s: float,
              view_ids: list | None = None) -> Tensor:
    """Multi-view distillation over clean views.

    ``view_ids[v]`` names the teacher view that student view ``v`` shares its
    input with (``None`` for local crops); same-view pairs are skipped. By
    default the first ``len(teacher_global)`` student views are the globals in
    teacher order.
    """
    if view_ids is None:
        view_ids = [v if v < len(teacher_global) else None for v in range(len(student_views))]
    if len(view_ids) != len(student_views):
        raise LossError(f"dino_loss: {len(view_ids)} view ids for {len(student_views)} student views")
    terms = []
    for t_idx, p_t in enumerate(teacher_global):
        for v, s in enumerate(student_views):
            if view_ids[v] == t_idx:
                continue
            terms.append(soft_cross_entropy(p_t, s, tau_s))
    if not terms:
        raise LossError("dino_loss: no teacher/student view pairs")
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def dino_total_loss(clean: Tensor, source: Tensor | None = None, mix: Tensor | None = None) -> Tensor:
    total = clean
    for part in (source, mix):
        if part is not None:
            total = T.add(total, part)
    return total
