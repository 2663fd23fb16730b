"""Procedural multi-class segmentation scenes with controllable heterogeneity.

Each image is a textured background plus a few colored geometric primitives
(horizontal bands, discs, rectangles, triangles), one primitive kind per
class. Per-client heterogeneity has two independent knobs: appearance shift
(hue rotation, brightness, noise, texture) and label skew (per-class sampling
priors). Geometry and appearance consume separate RNG streams, so two clients
that differ only in appearance produce bit-identical masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, FormatError

SHAPE_KINDS = ("band", "disc", "rect", "triangle")

# Distinct RNG substreams so appearance knobs can never perturb geometry.
_CLASS_STREAM = 101
_GEOM_STREAM = 102
_APPEAR_STREAM = 103

_IDS_PER_CLIENT = 1_000_000


@dataclass(frozen=True)
class SceneSpec:
    """Geometry side of a dataset: canvas size, class count, primitive kinds."""

    height: int = 64
    width: int = 64
    num_classes: int = 6
    shapes_per_image: int = 4
    rng_seed: int = 0
    shape_kinds: Optional[tuple] = None  # kind per class 1..C-1; cycles by default

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.height < 16 or self.width < 16:
            raise ContractError("height and width must be >= 16")
        if self.shapes_per_image < 1:
            raise ContractError("shapes_per_image must be >= 1")
        if self.shape_kinds is not None:
            if len(self.shape_kinds) != self.num_classes - 1:
                raise ContractError("shape_kinds must cover classes 1..C-1")
            for k in self.shape_kinds:
                if k not in SHAPE_KINDS:
                    raise ContractError(f"unknown shape kind {k!r}")

    def kind_of(self, class_id: int) -> str:
        if self.shape_kinds is not None:
            return self.shape_kinds[class_id - 1]
        return SHAPE_KINDS[(class_id - 1) % len(SHAPE_KINDS)]


@dataclass(frozen=True)
class DomainShift:
    """Appearance transform + class-sampling prior for one client's domain."""

    class_prior: tuple
    hue_rotation: float = 0.0
    brightness_scale: float = 1.0
    noise_sigma: float = 0.0
    texture_freq: float = 3.0

    def __post_init__(self):
        if self.brightness_scale <= 0:
            raise ContractError("brightness_scale must be positive")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be non-negative")
        prior = np.asarray(self.class_prior, dtype=np.float64)
        if prior.ndim != 1 or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
            raise ContractError("class_prior must be a non-negative vector summing to 1")


@dataclass
class LabeledImage:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    mask: np.ndarray  # (H, W) int64 in [0, C)
    image_id: int
    client_id: int
    num_classes: int


def uniform_prior(num_classes: int, background: float = 0.12) -> tuple:
    fg = (1.0 - background) / (num_classes - 1)
    return (background,) + (fg,) * (num_classes - 1)


def class_palette(num_classes: int) -> np.ndarray:
    """Saturated, well-separated base color per class; class 0 is dim gray."""
    colors = np.zeros((num_classes, 3))
    colors[0] = (0.38, 0.40, 0.42)
    for c in range(1, num_classes):
        a = 2.0 * np.pi * (c - 1) / (num_classes - 1)
        colors[c] = 0.55 + 0.4 * np.array([np.cos(a), np.cos(a - 2 * np.pi / 3), np.cos(a + 2 * np.pi / 3)])
    return np.clip(colors, 0.05, 0.95)


def hue_rotation_matrix(theta: float) -> np.ndarray:
    """Rotation of RGB space around the gray axis (1,1,1)/sqrt(3)."""
    u = np.ones(3) / np.sqrt(3.0)
    k = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return np.cos(theta) * np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * np.outer(u, u)


def sample_shape_classes(spec: SceneSpec, shift: DomainShift, n: int) -> np.ndarray:
    """Class id per (image, shape slot), drawn i.i.d. from the client prior.

    Slot class 0 means the slot stays empty, so the prior directly sets the
    frequency of rendered classes. Pure function of (spec.rng_seed, prior, n).
    """
    prior = np.asarray(shift.class_prior, dtype=np.float64)
    if prior.shape[0] != spec.num_classes:
        raise ContractError("class_prior length must equal num_classes")
    rng = np.random.default_rng([spec.rng_seed, _CLASS_STREAM])
    return rng.choice(spec.num_classes, size=(n, spec.shapes_per_image), p=prior / prior.sum())


def _shape_region(kind: str, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    h, w = yy.shape
    if kind == "band":
        u = rng.uniform(size=2)
        y0 = u[0] * 0.72 * h
        thick = (0.10 + 0.14 * u[1]) * h
        return (yy >= y0) & (yy < y0 + thick)
    if kind == "disc":
        u = rng.uniform(size=3)
        r = (0.10 + 0.12 * u[0]) * min(h, w)
        cx = r + u[1] * (w - 2 * r)
        cy = r + u[2] * (h - 2 * r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rect":
        u = rng.uniform(size=4)
        rw = (0.16 + 0.20 * u[0]) * w
        rh = (0.16 + 0.20 * u[1]) * h
        x0 = u[2] * (w - rw)
        y0 = u[3] * (h - rh)
        return (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
    if kind == "triangle":
        u = rng.uniform(size=4)
        ht = (0.20 + 0.18 * u[0]) * h
        hb = (0.14 + 0.14 * u[1]) * w
        cx = hb + u[2] * (w - 2 * hb)
        y0 = u[3] * (h - ht)
        rise = (yy - y0) / ht
        return (rise >= 0) & (rise <= 1) & (np.abs(xx - cx) <= rise * hb)
    raise ContractError(f"unknown shape kind {kind!r}")


def _render_image(spec: SceneSpec, shift: DomainShift, slot_classes: np.ndarray, index: int):
    h, w = spec.height, spec.width
    geom = np.random.default_rng([spec.rng_seed, _GEOM_STREAM, index])
    appear = np.random.default_rng([spec.rng_seed, _APPEAR_STREAM, index])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    palette = class_palette(spec.num_classes)

    phase = appear.uniform(0, 2 * np.pi, size=2)
    tex = 0.06 * np.sin(2 * np.pi * shift.texture_freq * xx / w + phase[0]) * np.sin(
        2 * np.pi * shift.texture_freq * yy / h + phase[1]
    )
    img = palette[0][:, None, None] + tex[None]
    mask = np.zeros((h, w), dtype=np.int64)

    for c in slot_classes:
        if c == 0:
            continue
        region = _shape_region(spec.kind_of(int(c)), geom, yy, xx)
        jitter = 1.0 + 0.12 * (appear.uniform() - 0.5)
        mask[region] = c
        img[:, region] = (palette[c] * jitter)[:, None]

    img = np.einsum("ab,bhw->ahw", hue_rotation_matrix(shift.hue_rotation), img)
    img *= shift.brightness_scale
    if shift.noise_sigma > 0:
        img += appear.normal(0.0, shift.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0), mask


def generate_dataset(
    spec: SceneSpec, shift: DomainShift, n: int, client_id: int = 0, id_base: Optional[int] = None
) -> list:
    """Render n labeled images; deterministic in (spec.rng_seed, shift, n)."""
    if n < 1:
        raise ContractError("n must be >= 1")
    slot_classes = sample_shape_classes(spec, shift, n)
    base = id_base if id_base is not None else client_id * _IDS_PER_CLIENT
    out = []
    for i in range(n):
        img, mask = _render_image(spec, shift, slot_classes[i], i)
        out.append(
            LabeledImage(
                image=img, mask=mask, image_id=base + i, client_id=client_id, num_classes=spec.num_classes
            )
        )
    return out


def binary_mask(img: LabeledImage, c: int) -> np.ndarray:
    """0/1 map marking pixels of class c."""
    if not 0 <= c < img.num_classes:
        raise ContractError(f"class id {c} out of range [0, {img.num_classes})")
    return (img.mask == c).astype(np.int64)


@dataclass
class ClientData:
    client_id: int
    train: list
    val: list


@dataclass
class FederationSplit:
    clients: list  # ClientData for every training client
    unseen: Optional[list] = None  # held-out domain images, never trained on
    holdout_client: Optional[int] = None


def split_federation(
    specs: Sequence[SceneSpec],
    shifts: Sequence[DomainShift],
    n_train: int,
    n_val: int,
    holdout_client: Optional[int] = None,
) -> FederationSplit:
    """Per-client train/val datasets with globally unique image ids.

    With a holdout, that client's domain contributes only an evaluation set;
    its images never enter any training client.
    """
    if len(specs) != len(shifts):
        raise ContractError("specs and shifts must align")
    n = len(specs)
    if n < 2:
        raise ContractError("need at least 2 clients")
    if holdout_client is not None and not 0 <= holdout_client < n:
        raise ContractError(f"holdout_client {holdout_client} out of range [0, {n})")
    if n_train < 1 or n_val < 1:
        raise ContractError("n_train and n_val must be >= 1")

    clients, unseen = [], None
    for k in range(n):
        if holdout_client is not None and k == holdout_client:
            unseen = generate_dataset(specs[k], shifts[k], n_val, client_id=k)
        else:
            images = generate_dataset(specs[k], shifts[k], n_train + n_val, client_id=k)
            clients.append(ClientData(client_id=k, train=images[:n_train], val=images[n_train:]))
    return FederationSplit(clients=clients, unseen=unseen, holdout_client=holdout_client)


def _skewed_prior(num_classes: int, favored: int, decay: float, background: float) -> tuple:
    fg = decay ** ((np.arange(num_classes - 1) - favored) % (num_classes - 1))
    fg = fg / fg.sum() * (1.0 - background)
    return (background,) + tuple(fg)


def severe_preset(num_clients: int = 4, num_classes: int = 6, size: int = 64, base_seed: int = 0):
    """Strong heterogeneity: hue rotations spread around the color wheel,
    wide brightness range, and a different dominant class per client."""
    pairs = []
    for k in range(num_clients):
        spec = SceneSpec(height=size, width=size, num_classes=num_classes, rng_seed=base_seed * 1_000_003 + k)
        shift = DomainShift(
            class_prior=_skewed_prior(num_classes, favored=k % (num_classes - 1), decay=0.45, background=0.12),
            hue_rotation=2.0 * np.pi * k / num_clients,
            brightness_scale=0.7 + 0.6 * (k / max(num_clients - 1, 1)),
            noise_sigma=0.02 + 0.02 * (k % 2),
            texture_freq=2.0 + k,
        )
        pairs.append((spec, shift))
    return pairs


def slight_preset(num_clients: int = 4, num_classes: int = 6, size: int = 64, base_seed: int = 0):
    """Mild heterogeneity: small jitter around a shared appearance and a
    gently tilted class prior."""
    pairs = []
    for k in range(num_clients):
        spec = SceneSpec(height=size, width=size, num_classes=num_classes, rng_seed=base_seed * 1_000_003 + k)
        shift = DomainShift(
            class_prior=_skewed_prior(num_classes, favored=k % (num_classes - 1), decay=0.9, background=0.12),
            hue_rotation=0.12 * (k / max(num_clients - 1, 1) - 0.5),
            brightness_scale=0.95 + 0.10 * (k / max(num_clients - 1, 1)),
            noise_sigma=0.01,
            texture_freq=3.0,
        )
        pairs.append((spec, shift))
    return pairs


def make_preset(name: str, num_clients: int, num_classes: int, size: int, base_seed: int):
    if name == "severe":
        return severe_preset(num_clients, num_classes, size, base_seed)
    if name == "slight":
        return slight_preset(num_clients, num_classes, size, base_seed)
    raise ContractError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# On-disk dataset format: JSON manifest + flat binary tensors
# ---------------------------------------------------------------------------


def save_dataset(images: Sequence[LabeledImage], out_dir, meta: Optional[dict] = None) -> None:
    """Write images.bin (little-endian f64) + masks.bin (u8) + manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not images:
        raise ContractError("cannot save an empty dataset")
    h, w = images[0].mask.shape
    c = images[0].num_classes
    if c > 255:
        raise FormatError("mask byte format supports at most 255 classes")
    records = []
    with open(out / "images.bin", "wb") as fi, open(out / "masks.bin", "wb") as fm:
        for im in images:
            if im.mask.shape != (h, w) or im.image.shape != (3, h, w):
                raise FormatError("all images in a dataset must share one shape")
            fi.write(im.image.astype("<f8").tobytes())
            fm.write(im.mask.astype(np.uint8).tobytes())
            records.append({"client_id": im.client_id, "image_id": im.image_id})
    manifest = {
        "count": len(images),
        "height": h,
        "width": w,
        "channels": 3,
        "num_classes": c,
        "image_dtype": "<f8",
        "mask_dtype": "u1",
        "records": records,
        "meta": meta or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_dataset(in_dir) -> list:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
        n, h, w = manifest["count"], manifest["height"], manifest["width"]
        c = manifest["num_classes"]
        records = manifest["records"]
        imgs = np.frombuffer((src / "images.bin").read_bytes(), dtype="<f8")
        masks = np.frombuffer((src / "masks.bin").read_bytes(), dtype="u1")
    except FormatError:
        raise
    except (KeyError, ValueError, OSError) as e:
        raise FormatError(f"bad dataset directory {src}: {e}") from e
    if imgs.size != n * 3 * h * w or masks.size != n * h * w or len(records) != n:
        raise FormatError("dataset payload sizes disagree with the manifest")
    imgs = imgs.reshape(n, 3, h, w)
    masks = masks.reshape(n, h, w)
    return [
        LabeledImage(
            image=imgs[i].astype(np.float64),
            mask=masks[i].astype(np.int64),
            image_id=rec["image_id"],
            client_id=rec["client_id"],
            num_classes=c,
        )
        for i, rec in enumerate(records)
    ]
