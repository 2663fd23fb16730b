"""Model components: two-branch segmentation model, frozen feature FCN,
branch-origin discriminator, and the prototype-to-kernel weight generator.

Every component keeps its parameters in a flat name->Tensor dict so that
serialization, aggregation, and head overwrite operate uniformly. The shared
checkpoint wire format is a canonical JSON shape manifest followed by the
little-endian float64 parameter payload in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, FormatError, NumericFaultError

K_CH_DEFAULT = 32
_EXTRACTOR_DOWNSCALE = 4

# Model-init RNG substreams.
_STREAM_GLOBAL = 11
_STREAM_LOCAL = 12
_STREAM_DISC = 13
_STREAM_FCN = 14
_STREAM_GEN = 15


def _he_conv(rng, cout, cin, k) -> np.ndarray:
    return rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))


def _he_fc(rng, n_in, n_out) -> np.ndarray:
    return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)


def _param(data) -> ad.Tensor:
    return ad.Tensor(data, requires_grad=True)


def init_extractor(rng: np.random.Generator, k_ch: int) -> Dict[str, ad.Tensor]:
    """3-layer conv feature extractor, output at 1/4 spatial resolution."""
    mid = max(k_ch // 2, 4)
    return {
        "conv1.w": _param(_he_conv(rng, mid, 3, 3)),
        "conv1.b": _param(np.zeros(mid)),
        "conv2.w": _param(_he_conv(rng, k_ch, mid, 3)),
        "conv2.b": _param(np.zeros(k_ch)),
        "conv3.w": _param(_he_conv(rng, k_ch, k_ch, 3)),
        "conv3.b": _param(np.zeros(k_ch)),
    }


def init_head(rng: np.random.Generator, k_ch: int, num_classes: int) -> Dict[str, ad.Tensor]:
    """1x1 classifier over extractor features."""
    return {
        "head.w": _param(_he_conv(rng, num_classes, k_ch, 1)),
        "head.b": _param(np.zeros(num_classes)),
    }


def extractor_forward(params: Dict[str, ad.Tensor], x: ad.Tensor) -> ad.Tensor:
    f = ad.relu(ad.add_channel_bias(ad.conv2d(x, params["conv1.w"], stride=2, padding=1), params["conv1.b"]))
    f = ad.relu(ad.add_channel_bias(ad.conv2d(f, params["conv2.w"], stride=2, padding=1), params["conv2.b"]))
    return ad.relu(ad.add_channel_bias(ad.conv2d(f, params["conv3.w"], stride=1, padding=1), params["conv3.b"]))


def head_forward(params: Dict[str, ad.Tensor], feats: ad.Tensor) -> ad.Tensor:
    return ad.add_channel_bias(ad.conv2d(feats, params["head.w"], stride=1, padding=0), params["head.b"])


class TwoBranchModel:
    """Client model: a global branch aligned with the server and a local
    branch fit to the client's own domain, fused at inference by averaging."""

    def __init__(self, num_classes: int, seed: int, k_ch: int = K_CH_DEFAULT):
        self.num_classes = num_classes
        self.k_ch = k_ch
        g = np.random.default_rng([seed, _STREAM_GLOBAL])
        l = np.random.default_rng([seed, _STREAM_LOCAL])
        self.global_extractor = init_extractor(g, k_ch)
        self.global_head = init_head(g, k_ch, num_classes)
        self.local_extractor = init_extractor(l, k_ch)
        self.local_head = init_head(l, k_ch, num_classes)
        self.proto_rows: Optional[np.ndarray] = None  # (C, k_ch) frozen kernel rows

    # -- forward ------------------------------------------------------------

    def features(self, branch: str, x: ad.Tensor) -> ad.Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise DimensionError("model input must be (N, 3, H, W)")
        ext = self.global_extractor if branch == "global" else self.local_extractor
        return extractor_forward(ext, x)

    def logits_from_features(self, branch: str, feats: ad.Tensor, proto_rows: Optional[ad.Tensor] = None) -> ad.Tensor:
        """Branch logits at feature resolution (1/4 of input).

        For the global branch, installed prototype kernel rows act as an
        auxiliary 1x1 classifier averaged with the segmentation head.
        """
        head = self.global_head if branch == "global" else self.local_head
        z = head_forward(head, feats)
        if branch == "global":
            rows = proto_rows
            if rows is None and self.proto_rows is not None:
                rows = ad.Tensor(self.proto_rows)
            if rows is not None:
                kernel = ad.reshape(rows, (self.num_classes, self.k_ch, 1, 1))
                z = ad.scale(z + ad.conv2d(feats, kernel, stride=1, padding=0), 0.5)
        return z

    def forward_branch(self, branch: str, x: ad.Tensor, proto_rows: Optional[ad.Tensor] = None) -> ad.Tensor:
        """Full-resolution branch logits (N, C, H, W)."""
        z = self.logits_from_features(branch, self.features(branch, x), proto_rows)
        out = ad.upsample_nearest(z, _EXTRACTOR_DOWNSCALE)
        if not np.all(np.isfinite(out.data)):
            raise NumericFaultError(f"non-finite logits in {branch} branch")
        return out

    # -- prototype conditioning ----------------------------------------------

    def install_prototype_conv(self, prototypes: np.ndarray, gen: "WeightGenerator") -> None:
        """Freeze f_w(g_c) as the auxiliary classifier rows of the global branch."""
        protos = np.asarray(prototypes, dtype=np.float64)
        if protos.shape != (self.num_classes, self.k_ch):
            raise ContractError(f"need one prototype per class, got shape {protos.shape}")
        with ad.no_grad():
            rows = gen.forward(ad.Tensor(protos))
        self.proto_rows = rows.data.copy()

    def clear_prototype_conv(self) -> None:
        self.proto_rows = None

    # -- parameter plumbing ---------------------------------------------------

    def global_branch_params(self) -> Dict[str, ad.Tensor]:
        out = {f"ext.{k}": v for k, v in self.global_extractor.items()}
        out.update({k: v for k, v in self.global_head.items()})
        return out

    def local_branch_params(self) -> Dict[str, ad.Tensor]:
        out = {f"ext.{k}": v for k, v in self.local_extractor.items()}
        out.update({k: v for k, v in self.local_head.items()})
        return out

    def all_params(self) -> Dict[str, ad.Tensor]:
        out = {f"g.{k}": v for k, v in self.global_branch_params().items()}
        out.update({f"l.{k}": v for k, v in self.local_branch_params().items()})
        return out

    def set_global_head(self, head_values: Dict[str, np.ndarray]) -> None:
        assign_params(self.global_head, head_values)

    def set_global_branch(self, values: Dict[str, np.ndarray]) -> None:
        assign_params(self.global_branch_params(), values)

    def set_all(self, values: Dict[str, np.ndarray]) -> None:
        assign_params(self.all_params(), values)


class ExemplarFcn:
    """Small frozen FCN whose output matches the input size and channel count,
    so masked feature maps can be fed back through any branch unchanged."""

    def __init__(self, seed: int):
        rng = np.random.default_rng([seed, _STREAM_FCN])
        self.params = {
            "c1.w": ad.Tensor(_he_conv(rng, 8, 3, 3)),
            "c1.b": ad.Tensor(np.zeros(8)),
            "c2.w": ad.Tensor(_he_conv(rng, 3, 8, 3)),
            "c2.b": ad.Tensor(np.zeros(3)),
        }

    def forward(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            t = ad.Tensor(np.asarray(x, dtype=np.float64))
            if t.data.ndim == 3:
                t = ad.Tensor(t.data[None])
                squeeze = True
            else:
                squeeze = False
            f = ad.relu(ad.add_channel_bias(ad.conv2d(t, self.params["c1.w"], 1, 1), self.params["c1.b"]))
            out = ad.add_channel_bias(ad.conv2d(f, self.params["c2.w"], 1, 1), self.params["c2.b"])
        return out.data[0] if squeeze else out.data


class Discriminator:
    """MLP over globally average-pooled logits scoring branch origin in (0,1).

    The final layer starts at zero so an untrained discriminator outputs 0.5.
    """

    def __init__(self, num_classes: int, seed: int, hidden=(64, 32)):
        rng = np.random.default_rng([seed, _STREAM_DISC])
        h1, h2 = hidden
        self.params = {
            "fc1.w": _param(_he_fc(rng, num_classes, h1)),
            "fc1.b": _param(np.zeros(h1)),
            "fc2.w": _param(_he_fc(rng, h1, h2)),
            "fc2.b": _param(np.zeros(h2)),
            "fc3.w": _param(np.zeros((h2, 1))),
            "fc3.b": _param(np.zeros(1)),
        }

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def forward(self, logits: ad.Tensor) -> ad.Tensor:
        """Per-sample probability that the logits came from the global branch."""
        pooled = ad.global_avg_pool(logits) if logits.data.ndim == 4 else logits
        p = self.params
        h = ad.relu(ad.matmul(pooled, p["fc1.w"]) + ad.reshape(p["fc1.b"], (1, -1)))
        h = ad.relu(ad.matmul(h, p["fc2.w"]) + ad.reshape(p["fc2.b"], (1, -1)))
        out = ad.sigmoid(ad.matmul(h, p["fc3.w"]) + ad.reshape(p["fc3.b"], (1, -1)))
        return ad.reshape(out, (out.data.shape[0],))


class WeightGenerator:
    """MLP f_w projecting a class prototype vector into 1x1 kernel space."""

    def __init__(self, k_ch: int, seed: int):
        rng = np.random.default_rng([seed, _STREAM_GEN])
        hidden = 2 * k_ch
        self.k_ch = k_ch
        self.params = {
            "fc1.w": _param(_he_fc(rng, k_ch, hidden)),
            "fc1.b": _param(np.zeros(hidden)),
            "fc2.w": _param(_he_fc(rng, hidden, k_ch)),
            "fc2.b": _param(np.zeros(k_ch)),
        }

    def forward(self, g: ad.Tensor) -> ad.Tensor:
        """(C, k_ch) prototypes -> (C, k_ch) kernel rows."""
        if g.data.ndim != 2 or g.data.shape[1] != self.k_ch:
            raise DimensionError(f"prototypes must be (C, {self.k_ch})")
        p = self.params
        h = ad.relu(ad.matmul(g, p["fc1.w"]) + ad.reshape(p["fc1.b"], (1, -1)))
        return ad.matmul(h, p["fc2.w"]) + ad.reshape(p["fc2.b"], (1, -1))


def fuse_outputs(z_local: ad.Tensor, z_global: ad.Tensor) -> ad.Tensor:
    """Average the two branch logit maps into the final prediction."""
    if z_local.data.shape != z_global.data.shape:
        raise ContractError("branch logits must share a shape to fuse")
    return ad.scale(z_local + z_global, 0.5)


# ---------------------------------------------------------------------------
# Parameter (de)serialization: canonical manifest + little-endian f64 payload
# ---------------------------------------------------------------------------


def param_values(params: Dict[str, ad.Tensor]) -> Dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def assign_params(params: Dict[str, ad.Tensor], values: Dict[str, np.ndarray]) -> None:
    if set(params) != set(values):
        raise FormatError(f"parameter name mismatch: {sorted(set(params) ^ set(values))}")
    for k, t in params.items():
        v = np.asarray(values[k], dtype=np.float64)
        if v.shape != t.data.shape:
            raise FormatError(f"shape mismatch for {k}: {v.shape} vs {t.data.shape}")
        t.data = v.copy()


def serialize_params(params) -> bytes:
    """4-byte manifest length + JSON [name, shape] manifest + f64 payload."""
    names = sorted(params)
    manifest = json.dumps(
        [[k, list(np.shape(_data(params[k])))] for k in names], separators=(",", ":")
    ).encode()
    payload = b"".join(np.ascontiguousarray(_data(params[k]), dtype="<f8").tobytes() for k in names)
    return struct.pack("<I", len(manifest)) + manifest + payload


def _data(v) -> np.ndarray:
    return v.data if isinstance(v, ad.Tensor) else np.asarray(v, dtype=np.float64)


def deserialize_params(blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) < 4:
        raise FormatError("parameter blob too short for header")
    (mlen,) = struct.unpack_from("<I", blob, 0)
    if 4 + mlen > len(blob):
        raise FormatError("parameter manifest exceeds blob")
    try:
        manifest = json.loads(blob[4 : 4 + mlen].decode())
        entries = [(str(name), tuple(int(d) for d in shape)) for name, shape in manifest]
    except (ValueError, TypeError) as e:
        raise FormatError(f"bad parameter manifest: {e}") from e
    out = {}
    off = 4 + mlen
    for name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(blob):
            raise FormatError(f"parameter payload truncated at {name}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(blob):
        raise FormatError("trailing bytes after parameter payload")
    return out


def serialized_size(params) -> int:
    names = sorted(params)
    manifest = json.dumps([[k, list(np.shape(_data(params[k])))] for k in names], separators=(",", ":")).encode()
    return 4 + len(manifest) + 8 * sum(int(np.prod(np.shape(_data(params[k])) or (1,))) for k in names)


def params_hash(params) -> str:
    return hashlib.sha256(serialize_params(params)).hexdigest()
