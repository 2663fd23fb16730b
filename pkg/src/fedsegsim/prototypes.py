"""Server-side class prototypes.

Uploaded exemplars are embedded with the server's global extractor, pooled
into per-class distribution vectors weighted by class rarity, and mixed across
classes through a spatial co-occurrence/correlation analysis, yielding one
prototype vector per class that conditions the global segmentation head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_dilation

from . import autodiff as ad
from .errors import ContractError, DegenerateExemplarError, EmptyPrototypeError
from .exemplars import ClassExemplar, ExemplarStore
from .models import extractor_forward

RARITY_FLOOR = 0.1
DEFAULT_RADIUS = 2
DOWNSCALE = 4


@dataclass(frozen=True)
class DeepExemplar:
    """Exemplar embedded at feature resolution, zeroed outside its class."""

    h: np.ndarray  # (K_ch, h, w)
    active: np.ndarray  # bool (h, w)
    class_id: int
    client_id: int
    image_id: int

    @property
    def group_key(self) -> Tuple[int, int]:
        return (self.client_id, self.image_id)


@dataclass(frozen=True)
class ClassPrototype:
    g: np.ndarray  # (K_ch,)
    v: np.ndarray  # (K_ch,) distribution vector
    class_id: int


@dataclass(frozen=True)
class CooccurrenceStats:
    phi: np.ndarray  # (C, C) in [0, 1], diagonal unused (zero)
    R: np.ndarray  # (C, C) row-normalized correlation mix, diagonal zero
    counts: Dict[int, int]  # exemplars per class across the full store


def downsample_active(support: np.ndarray, factor: int = DOWNSCALE) -> np.ndarray:
    """Any-pooling of a binary map into factor x factor blocks (ragged tail ok)."""
    hs, ws = support.shape
    hb = -(-hs // factor)
    wb = -(-ws // factor)
    padded = np.zeros((hb * factor, wb * factor), dtype=bool)
    padded[:hs, :ws] = support != 0
    return padded.reshape(hb, factor, wb, factor).any(axis=(1, 3))


def embed_exemplars(
    extractor: Dict[str, ad.Tensor], exs: Sequence[ClassExemplar]
) -> Tuple[List[DeepExemplar], int]:
    """Embed a batch of exemplars; returns (embeddings, skipped_count).

    Exemplars whose active map vanishes at feature resolution are skipped.
    """
    if not exs:
        return [], 0
    if len({ex.feature.shape for ex in exs}) != 1:
        raise ContractError("all exemplars in one embedding batch must share a shape")
    batch = np.stack([ex.feature for ex in exs])
    with ad.no_grad():
        feats = extractor_forward(extractor, ad.Tensor(batch)).data
    out, skipped = [], 0
    for ex, h in zip(exs, feats):
        support = np.any(ex.feature != 0.0, axis=0)
        active = downsample_active(support)
        if active.shape != h.shape[1:]:
            raise ContractError(
                f"feature map {h.shape[1:]} does not match pooled mask {active.shape}"
            )
        if not active.any():
            skipped += 1
            continue
        out.append(
            DeepExemplar(
                h=h * active,
                active=active,
                class_id=ex.class_id,
                client_id=ex.client_id,
                image_id=ex.image_id,
            )
        )
    return out, skipped


def embed_exemplar(extractor: Dict[str, ad.Tensor], ex: ClassExemplar) -> DeepExemplar:
    """Single-exemplar embedding; raises when the active map pools to empty."""
    embedded, skipped = embed_exemplars(extractor, [ex])
    if skipped:
        raise DegenerateExemplarError(
            f"exemplar {ex.key} has no active cells at feature resolution"
        )
    return embedded[0]


def rarity_weights(counts: Dict[int, int]) -> Dict[int, float]:
    """Rare classes get weights near 1, common classes near the floor."""
    for c, k in counts.items():
        if k < 0:
            raise ContractError(f"negative exemplar count for class {c}")
    present = {c: k for c, k in counts.items() if k > 0}
    if not present:
        raise EmptyPrototypeError("no class has any exemplars")
    lo, hi = min(present.values()), max(present.values())
    if lo == hi:
        return {c: 1.0 for c in present}
    return {
        c: RARITY_FLOOR + (1.0 - RARITY_FLOOR) * (hi - k) / (hi - lo)
        for c, k in present.items()
    }


def masked_gap(deep: DeepExemplar) -> np.ndarray:
    """Per-channel mean of h over active cells."""
    return deep.h.sum(axis=(1, 2)) / deep.active.sum()


def distribution_vector(deeps: Sequence[DeepExemplar], beta: float) -> np.ndarray:
    """Rarity-weighted average of pooled embeddings for one class."""
    if not deeps:
        raise ContractError("distribution vector needs at least one exemplar")
    return beta * np.mean([masked_gap(d) for d in deeps], axis=0)


def _group_by_image(deeps: Iterable[DeepExemplar]) -> Dict[Tuple[int, int], Dict[int, DeepExemplar]]:
    groups: Dict[Tuple[int, int], Dict[int, DeepExemplar]] = {}
    for d in deeps:
        img = groups.setdefault(d.group_key, {})
        if d.class_id in img:
            raise ContractError(f"duplicate class {d.class_id} in image group {d.group_key}")
        img[d.class_id] = d
    return groups


def cooccurrence(
    deeps: Sequence[DeepExemplar], num_classes: int, radius: int = DEFAULT_RADIUS
) -> np.ndarray:
    """phi[c][c'] = mean over images containing c of the fraction of c's active
    cells that have a c' cell within Chebyshev distance `radius`. Diagonal 0."""
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    totals = np.zeros((num_classes, num_classes))
    images_with = np.zeros(num_classes)
    for img in _group_by_image(deeps).values():
        classes = sorted(img)
        dilated = {c: binary_dilation(img[c].active, structure=structure) for c in classes}
        for c in classes:
            images_with[c] += 1
            area = img[c].active.sum()
            for c2 in classes:
                if c2 == c:
                    continue
                totals[c, c2] += np.logical_and(img[c].active, dilated[c2]).sum() / area
    phi = np.zeros((num_classes, num_classes))
    nonzero = images_with > 0
    phi[nonzero] = totals[nonzero] / images_with[nonzero, None]
    return phi


def correlation(
    deeps: Sequence[DeepExemplar],
    phi: np.ndarray,
    num_classes: int,
    radius: int = DEFAULT_RADIUS,
    sigma: Optional[float] = None,
) -> np.ndarray:
    """Row-normalized class-correlation mix.

    For each ordered class pair, neighboring active-cell pairs (Chebyshev
    distance <= radius, within one image) contribute their channel inner
    product damped by a Gaussian in Euclidean distance; the accumulated sum is
    scaled by phi, normalized by active-cell and pair counts, and each row is
    normalized to total 1 (or left zero).
    """
    if sigma is None:
        sigma = radius / 2.0
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    sums = np.zeros((num_classes, num_classes))
    pair_counts = np.zeros((num_classes, num_classes))
    active_cells = np.zeros(num_classes)
    for img in _group_by_image(deeps).values():
        classes = sorted(img)
        coords = {c: np.argwhere(img[c].active) for c in classes}
        vecs = {c: img[c].h[:, img[c].active].T for c in classes}  # (n_cells, K_ch)
        for c in classes:
            active_cells[c] += len(coords[c])
            for c2 in classes:
                if c2 == c:
                    continue
                diff = coords[c][:, None, :] - coords[c2][None, :, :]
                cheb = np.abs(diff).max(axis=2)
                near = cheb <= radius
                if not near.any():
                    continue
                d2 = (diff**2).sum(axis=2)
                gram = vecs[c] @ vecs[c2].T
                sums[c, c2] += (gram * np.exp(-d2 / (2.0 * sigma**2)))[near].sum()
                pair_counts[c, c2] += near.sum()
    raw = np.zeros((num_classes, num_classes))
    has_pairs = pair_counts > 0
    denom = active_cells[:, None] * pair_counts
    raw[has_pairs] = phi[has_pairs] * sums[has_pairs] / denom[has_pairs]
    np.fill_diagonal(raw, 0.0)
    row_sums = raw.sum(axis=1, keepdims=True)
    return np.divide(raw, row_sums, out=np.zeros_like(raw), where=row_sums > 0)


def compose_prototypes(
    vectors: Dict[int, np.ndarray], R: np.ndarray
) -> List[ClassPrototype]:
    """g_c = v_c + mean-scaled correlation mix of the other classes' vectors."""
    classes = sorted(vectors)
    n = len(classes)
    out = []
    for c in classes:
        mix = np.zeros_like(vectors[c])
        for c2 in classes:
            if c2 != c:
                mix = mix + R[c, c2] * vectors[c2]
        out.append(ClassPrototype(g=vectors[c] + mix / n, v=vectors[c].copy(), class_id=c))
    return out


def prototype_matrix(protos: Sequence[ClassPrototype], num_classes: int, k_ch: int) -> np.ndarray:
    """(C, K_ch) matrix of prototypes; classes without exemplars get zero rows."""
    mat = np.zeros((num_classes, k_ch))
    for p in protos:
        mat[p.class_id] = p.g
    return mat


def build_prototypes(
    extractor: Dict[str, ad.Tensor],
    store: ExemplarStore,
    num_classes: int,
    k_ch: int,
    rng: np.random.Generator,
    radius: int = DEFAULT_RADIUS,
    sigma: Optional[float] = None,
    max_images: Optional[int] = 64,
) -> Tuple[np.ndarray, CooccurrenceStats, int]:
    """Full pipeline: store -> (prototype matrix, stats, skipped exemplars).

    Rarity counts always come from the complete store; the embedding pass may
    subsample whole images (`max_images`) to bound per-round cost.
    """
    counts: Dict[int, int] = {}
    for ex in store:
        counts[ex.class_id] = counts.get(ex.class_id, 0) + 1
    beta = rarity_weights(counts)  # raises EmptyPrototypeError on an empty store

    by_image: Dict[Tuple[int, int], List[ClassExemplar]] = {}
    for ex in store:
        by_image.setdefault((ex.client_id, ex.image_id), []).append(ex)
    keys = sorted(by_image)
    if max_images is not None and len(keys) > max_images:
        picked = rng.choice(len(keys), size=max_images, replace=False)
        keys = [keys[int(i)] for i in sorted(picked)]
    chosen = [ex for k in keys for ex in by_image[k]]

    deeps, skipped = embed_exemplars(extractor, chosen)
    per_class: Dict[int, List[DeepExemplar]] = {}
    for d in deeps:
        per_class.setdefault(d.class_id, []).append(d)
    if not per_class:
        raise EmptyPrototypeError("every sampled exemplar degenerated at feature resolution")

    vectors = {c: distribution_vector(ds, beta[c]) for c, ds in per_class.items()}
    phi = cooccurrence(deeps, num_classes, radius)
    R = correlation(deeps, phi, num_classes, radius, sigma)
    protos = compose_prototypes(vectors, R)
    stats = CooccurrenceStats(phi=phi, R=R, counts=counts)
    return prototype_matrix(protos, num_classes, k_ch), stats, skipped
