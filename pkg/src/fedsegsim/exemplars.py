"""Class exemplars: masked feature maps extracted once per client, normalized
into contrastive vectors, optionally subsampled for upload, and shipped to the
server in a fixed binary wire format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from .errors import ContractError, DegenerateExemplarError, FormatError
from .models import ExemplarFcn
from .scenes import LabeledImage, binary_mask

_HEADER = struct.Struct("<IIHHH")  # client_id, image_id, class_id, H, W
HEADER_BYTES = _HEADER.size


@dataclass(frozen=True)
class ClassExemplar:
    """Per-channel feature map zeroed everywhere outside one class's mask."""

    feature: np.ndarray  # (3, H, W) float64
    class_id: int
    client_id: int
    image_id: int
    active_pixels: int

    def __post_init__(self):
        f = self.feature
        if f.ndim != 3 or f.shape[0] != 3:
            raise ContractError(f"exemplar feature must be (3, H, W), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ContractError("exemplar feature must be finite")
        if self.active_pixels < 1:
            raise ContractError("exemplar must cover at least one pixel")

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.client_id, self.image_id, self.class_id)


@dataclass(frozen=True)
class ExemplarVector:
    """Unit-norm pooled exemplar descriptor used as a contrastive target."""

    v: np.ndarray
    class_id: int
    client_id: int


def extract_exemplars(
    fcn: ExemplarFcn, img: LabeledImage, include_background: bool = True
) -> List[ClassExemplar]:
    """One masked feature map per class present in the image's mask."""
    feats = fcn.forward(img.image)
    out = []
    present = np.unique(img.mask)
    for c in present:
        c = int(c)
        if c == 0 and not include_background:
            continue
        mask = binary_mask(img, c)
        out.append(
            ClassExemplar(
                feature=feats * mask[None],
                class_id=c,
                client_id=img.client_id,
                image_id=img.image_id,
                active_pixels=int(mask.sum()),
            )
        )
    return out


def to_vector(ex: ClassExemplar) -> ExemplarVector:
    """Mean feature over active positions, per channel, then L2-normalized."""
    pooled = ex.feature.sum(axis=(1, 2)) / ex.active_pixels
    norm = float(np.linalg.norm(pooled))
    if norm < 1e-12:
        raise DegenerateExemplarError(
            f"exemplar {ex.key} pools to the zero vector and cannot be normalized"
        )
    return ExemplarVector(v=pooled / norm, class_id=ex.class_id, client_id=ex.client_id)


def select_upload(
    exemplars: Sequence[ClassExemplar], ratio: float, rng: np.random.Generator
) -> List[ClassExemplar]:
    """Uniform subset of ceil(ratio * n) exemplars per class.

    Stratifying by class keeps every represented class represented, so upload
    ratio measures information loss rather than class-coverage loss.
    """
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"upload ratio must be in (0, 1], got {ratio}")
    if ratio == 1.0:
        return list(exemplars)
    by_class: Dict[int, List[int]] = {}
    for i, ex in enumerate(exemplars):
        by_class.setdefault(ex.class_id, []).append(i)
    chosen: List[int] = []
    for c in sorted(by_class):
        idx = by_class[c]
        take = math.ceil(ratio * len(idx))
        picks = rng.choice(len(idx), size=take, replace=False)
        chosen.extend(idx[int(j)] for j in picks)
    return [exemplars[i] for i in sorted(chosen)]


def serialize_exemplar(ex: ClassExemplar) -> bytes:
    """Fixed 14-byte header + little-endian float64 payload in C order."""
    _, h, w = ex.feature.shape
    if not (0 <= ex.client_id < 2**32 and 0 <= ex.image_id < 2**32):
        raise FormatError("client/image id out of u32 range")
    if not (0 <= ex.class_id < 2**16 and h < 2**16 and w < 2**16):
        raise FormatError("class id or image size out of u16 range")
    header = _HEADER.pack(ex.client_id, ex.image_id, ex.class_id, h, w)
    return header + np.ascontiguousarray(ex.feature, dtype="<f8").tobytes()


def deserialize_exemplar(blob: bytes) -> ClassExemplar:
    if len(blob) < HEADER_BYTES:
        raise FormatError("exemplar blob too short for header")
    client_id, image_id, class_id, h, w = _HEADER.unpack_from(blob, 0)
    expected = HEADER_BYTES + 8 * 3 * h * w
    if len(blob) != expected:
        raise FormatError(f"exemplar blob is {len(blob)} bytes, header implies {expected}")
    feature = (
        np.frombuffer(blob, dtype="<f8", count=3 * h * w, offset=HEADER_BYTES)
        .reshape(3, h, w)
        .astype(np.float64)
    )
    active = int(np.count_nonzero(np.any(feature != 0.0, axis=0)))
    if active == 0:
        raise DegenerateExemplarError("deserialized exemplar has no active pixels")
    return ClassExemplar(
        feature=feature,
        class_id=class_id,
        client_id=client_id,
        image_id=image_id,
        active_pixels=active,
    )


def serialized_exemplar_size(height: int, width: int) -> int:
    """Exact wire size in bytes of one serialized exemplar."""
    return HEADER_BYTES + 8 * 3 * height * width


class ExemplarStore:
    """Server-side exemplar collection keyed (client_id, image_id, class_id).

    Append-only while the federation is being set up; frozen afterwards.
    """

    def __init__(self):
        self._items: Dict[Tuple[int, int, int], ClassExemplar] = {}
        self._frozen = False

    def add(self, ex: ClassExemplar) -> None:
        if self._frozen:
            raise ContractError("exemplar store is frozen")
        if ex.key in self._items:
            raise ContractError(f"duplicate exemplar key {ex.key}")
        self._items[ex.key] = ex

    def freeze(self) -> None:
        self._frozen = True

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[ClassExemplar]:
        return iter(self._items.values())

    def classes(self) -> List[int]:
        return sorted({ex.class_id for ex in self._items.values()})

    def by_class(self, class_id: int) -> List[ClassExemplar]:
        return [ex for ex in self._items.values() if ex.class_id == class_id]

    def by_client(self, client_id: int) -> List[ClassExemplar]:
        return [ex for ex in self._items.values() if ex.client_id == client_id]
