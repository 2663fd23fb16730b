"""Training objectives: contrastive alignment of exemplar embeddings, weighted
ensemble distillation, adversarial branch harmonization, and the composite
server/branch losses built from them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DegenerateExemplarError
from .exemplars import ClassExemplar
from .models import extractor_forward
from .prototypes import downsample_active

TAU_DEFAULT = 0.05
LAMBDA_ADV_DEFAULT = 0.1
SIM_EPS = 1e-6
MAX_POSITIVES = 4
MAX_NEGATIVES = 16


@dataclass(frozen=True)
class LossConfig:
    tau: float = TAU_DEFAULT
    lambda_adv: float = LAMBDA_ADV_DEFAULT
    sim_weighting: str = "cosine"
    sim_distill: str = "kl"

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if self.lambda_adv < 0:
            raise ContractError("lambda_adv must be non-negative")
        if self.sim_weighting != "cosine":
            raise ContractError(f"unsupported similarity weighting {self.sim_weighting!r}")
        if self.sim_distill != "kl":
            raise ContractError(f"unsupported distillation similarity {self.sim_distill!r}")


def info_nce(anchor: ad.Tensor, positives: ad.Tensor, negatives: ad.Tensor, tau: float = TAU_DEFAULT) -> ad.Tensor:
    """Mean over positives of the softmax contrast against shared negatives."""
    return ad.info_nce(anchor, positives, negatives, tau)


# ---------------------------------------------------------------------------
# Weighted ensemble distillation
# ---------------------------------------------------------------------------


def similarity_weights(
    client_logits: Sequence[Tuple[int, np.ndarray]], server_logits: np.ndarray
) -> np.ndarray:
    """Simplex weights over the client pool from clipped cosine similarity."""
    if not client_logits:
        raise ContractError("similarity weighting needs at least one client")
    z = np.asarray(server_logits, dtype=np.float64).ravel()
    zn = np.linalg.norm(z)
    scores = np.empty(len(client_logits))
    for n, (_, zi) in enumerate(client_logits):
        v = np.asarray(zi, dtype=np.float64).ravel()
        if v.shape != z.shape:
            raise ContractError("client and server logits must share a shape")
        denom = np.linalg.norm(v) * zn
        cos = float(v @ z / denom) if denom > 0 else 0.0
        scores[n] = max(cos, 0.0) + SIM_EPS
    return scores / scores.sum()


def aggregate_logits(
    alpha: np.ndarray, client_logits: Sequence[Tuple[int, np.ndarray]]
) -> np.ndarray:
    """Convex combination of client logit maps."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(alpha) != len(client_logits):
        raise ContractError("one weight per client required")
    if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-9:
        raise ContractError("weights must form a simplex")
    shapes = {np.shape(z) for _, z in client_logits}
    if len(shapes) != 1:
        raise ContractError("client logits must share a shape")
    out = np.zeros(shapes.pop())
    for a, (_, z) in zip(alpha, client_logits):
        out += a * np.asarray(z, dtype=np.float64)
    return out


@dataclass(frozen=True)
class DistillBatch:
    """One exemplar's distillation target: who contributed and with what weight."""

    exemplar_key: Tuple[int, int, int]
    source_client: int
    pool_clients: Tuple[int, ...]
    alpha: np.ndarray
    aggregate: np.ndarray

    def __post_init__(self):
        if self.source_client in self.pool_clients:
            raise ContractError("the exemplar's own client must be excluded from the pool")
        if abs(self.alpha.sum() - 1.0) > 1e-9 or np.any(self.alpha < 0):
            raise ContractError("alpha must form a simplex")


def make_distill_batch(
    exemplar: ClassExemplar,
    client_logits: Sequence[Tuple[int, np.ndarray]],
    server_logits: np.ndarray,
) -> DistillBatch:
    """Weight and aggregate the peer-client ensemble for one exemplar."""
    pool = [(cid, z) for cid, z in client_logits if cid != exemplar.client_id]
    if not pool:
        raise ContractError("distillation pool is empty after excluding the source client")
    alpha = similarity_weights(pool, server_logits)
    return DistillBatch(
        exemplar_key=exemplar.key,
        source_client=exemplar.client_id,
        pool_clients=tuple(cid for cid, _ in pool),
        alpha=alpha,
        aggregate=aggregate_logits(alpha, pool),
    )


def distill_loss(server_logits: ad.Tensor, aggregate: np.ndarray) -> ad.Tensor:
    """KL from the (constant) aggregated teacher to the server's predictions,
    averaged over spatial positions."""
    teacher = ad.Tensor(np.asarray(aggregate, dtype=np.float64))
    return ad.kl_divergence(teacher, server_logits, axis=1 if teacher.data.ndim > 1 else -1)


def server_loss(distill_part: ad.Tensor, inter_part: ad.Tensor) -> ad.Tensor:
    return distill_part + inter_part


# ---------------------------------------------------------------------------
# Adversarial harmonization
# ---------------------------------------------------------------------------


def discriminator_loss(p_hat: ad.Tensor, branch_labels: np.ndarray) -> ad.Tensor:
    """BCE of the discriminator's output against the true branch labels
    (1 = global branch, 0 = local branch)."""
    return ad.binary_cross_entropy(p_hat, branch_labels)


def confusion_loss(p_hat: ad.Tensor, branch_labels: np.ndarray) -> ad.Tensor:
    """BCE against flipped labels: a branch improves by being misclassified."""
    return ad.binary_cross_entropy(p_hat, 1.0 - np.asarray(branch_labels, dtype=np.float64))


def branch_losses(
    seg_global: ad.Tensor,
    seg_local: ad.Tensor,
    adv_global: ad.Tensor,
    adv_local: ad.Tensor,
    intra: Optional[ad.Tensor],
    lambda_t: float,
) -> Tuple[ad.Tensor, ad.Tensor]:
    """(L_global, L_local): segmentation plus weighted confusion terms, with
    the intra-client contrastive term on the local branch."""
    if lambda_t < 0:
        raise ContractError("lambda_t must be non-negative")
    l_global = seg_global + ad.scale(adv_global, lambda_t)
    l_local = seg_local + ad.scale(adv_local, lambda_t)
    if intra is not None:
        l_local = l_local + intra
    return l_global, l_local


# ---------------------------------------------------------------------------
# Contrastive batching over exemplar embeddings
# ---------------------------------------------------------------------------


def exemplar_units(
    extractor: Dict[str, ad.Tensor], exemplars: Sequence[ClassExemplar]
) -> Tuple[ad.Tensor, np.ndarray]:
    """(pooled, norms): per-exemplar masked-average embedding at feature
    resolution (differentiable), plus its data-space norms for validity checks.
    """
    if not exemplars:
        raise ContractError("no exemplars to embed")
    actives = []
    for ex in exemplars:
        active = downsample_active(np.any(ex.feature != 0.0, axis=0))
        if not active.any():
            raise DegenerateExemplarError(f"exemplar {ex.key} has no active feature cells")
        actives.append(active)
    batch = np.stack([ex.feature for ex in exemplars])
    mask = np.stack(actives).astype(np.float64)[:, None]
    counts = mask.sum(axis=(2, 3))  # (B, 1)
    feats = extractor_forward(extractor, ad.Tensor(batch))
    pooled = ad.mul(ad.tensor_sum(ad.mul(feats, ad.Tensor(mask)), axis=(2, 3)), ad.Tensor(1.0 / counts))
    return pooled, np.linalg.norm(pooled.data, axis=1)


def select_contrastive_indices(
    exemplars: Sequence[ClassExemplar],
    anchor_idx: int,
    rng: np.random.Generator,
    cross_client_positives: bool,
    max_pos: int = MAX_POSITIVES,
    max_neg: int = MAX_NEGATIVES,
) -> Optional[Tuple[List[int], List[int]]]:
    """Positive/negative index sample for one anchor, or None without positives.

    Positives share the anchor's class (from other clients when
    `cross_client_positives`, otherwise other exemplars of the same client);
    negatives are other-class exemplars never drawn from the anchor's image.
    """
    a = exemplars[anchor_idx]
    pos_pool, neg_pool = [], []
    for i, e in enumerate(exemplars):
        if i == anchor_idx:
            continue
        if e.class_id == a.class_id:
            if not cross_client_positives or e.client_id != a.client_id:
                pos_pool.append(i)
        elif (e.client_id, e.image_id) != (a.client_id, a.image_id):
            neg_pool.append(i)
    if not pos_pool:
        return None
    pos = rng.choice(len(pos_pool), size=min(max_pos, len(pos_pool)), replace=False)
    neg = rng.choice(len(neg_pool), size=min(max_neg, len(neg_pool)), replace=False)
    return sorted(pos_pool[int(i)] for i in pos), sorted(neg_pool[int(i)] for i in neg)


def contrastive_loss(
    extractor: Dict[str, ad.Tensor],
    exemplars: Sequence[ClassExemplar],
    rng: np.random.Generator,
    tau: float,
    cross_client_positives: bool,
    n_anchors: int = 1,
    max_pos: int = MAX_POSITIVES,
    max_neg: int = MAX_NEGATIVES,
) -> Optional[ad.Tensor]:
    """Mean InfoNCE over sampled anchors, or None if no anchor has a positive.

    Embeds only the exemplars an anchor actually references; exemplars whose
    embedding collapses to zero under the current extractor are dropped from
    that anchor's sample (and the anchor itself is skipped if it collapses).
    """
    candidates = [i for i in range(len(exemplars))]
    rng.shuffle(candidates)
    terms: List[ad.Tensor] = []
    for anchor_idx in candidates:
        if len(terms) >= n_anchors:
            break
        sel = select_contrastive_indices(
            exemplars, anchor_idx, rng, cross_client_positives, max_pos, max_neg
        )
        if sel is None:
            continue
        pos_idx, neg_idx = sel
        chosen = [anchor_idx] + pos_idx + neg_idx
        units, norms = exemplar_units(extractor, [exemplars[i] for i in chosen])
        valid = norms > 1e-12
        if not valid[0]:
            continue
        kept_pos = [k for k in range(1, 1 + len(pos_idx)) if valid[k]]
        if not kept_pos:
            continue
        kept_neg = [k for k in range(1 + len(pos_idx), len(chosen)) if valid[k]]
        normed = ad.l2_normalize(ad.index_rows(units, np.array([0] + kept_pos + kept_neg)))
        anchor = ad.index_rows(normed, np.array([0]))
        positives = ad.index_rows(normed, np.arange(1, 1 + len(kept_pos)))
        negatives = ad.index_rows(normed, np.arange(1 + len(kept_pos), 1 + len(kept_pos) + len(kept_neg)))
        terms.append(ad.info_nce(anchor, positives, negatives, tau))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.scale(total, 1.0 / len(terms))
