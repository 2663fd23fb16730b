"""Federated round orchestration for the two-branch segmentation protocol.

One round: broadcast the server head (plus prototypes and the kernel
generator when enabled), run every selected client's local two-stage
training, collect and average the uploaded global branches, distill the
client ensemble into the server branch on stored exemplars, regenerate
prototypes, evaluate, and apply the stability (rollback) policy.

Clients may execute in parallel threads; each owns its model, RNG stream,
and autodiff tape exclusively.  Server phases run single-threaded between
client barriers, and every reduction iterates clients in sorted-id order so
results never depend on completion order or worker count.

Communication accounting is exact: every payload that crosses the
client/server boundary is a serialized byte string, and the ledger records
its real length.  Broadcast payloads are counted once per round (multicast);
uploads are counted per client.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, NumericFaultError, SetupError
from .exemplars import (
    ClassExemplar,
    ExemplarStore,
    deserialize_exemplar,
    extract_exemplars,
    select_upload,
    serialize_exemplar,
)
from .losses import (
    LAMBDA_ADV_DEFAULT,
    TAU_DEFAULT,
    branch_losses,
    confusion_loss,
    contrastive_loss,
    discriminator_loss,
    distill_loss,
    make_distill_batch,
)
from .metrics import EvalReport, evaluate_client, evaluate_unseen
from .models import (
    Discriminator,
    ExemplarFcn,
    K_CH_DEFAULT,
    TwoBranchModel,
    WeightGenerator,
    assign_params,
    deserialize_params,
    extractor_forward,
    head_forward,
    param_values,
    serialize_params,
)
from .prototypes import CooccurrenceStats, build_prototypes
from .scenes import ClientData, FederationSplit, LabeledImage

ALGORITHMS = ("fedsaas", "fedavg")

# Master-seed sub-stream tags.  Every random draw in a run flows from
# `np.random.default_rng([seed, tag, ...])` so the full experiment is a pure
# function of the one recorded seed.
_STREAM_CLIENT_ROUND = 21  # [seed, 21, client_id, round]
_STREAM_SELECTION = 22  # [seed, 22, round]
_STREAM_DISTILL = 23  # [seed, 23, round]
_STREAM_PROTO = 24  # [seed, 24, round]
_STREAM_UPLOAD = 25  # [seed, 25, client_id]
_STREAM_PROBE = 31  # [seed, 31]

SUMMARY_COLUMNS = ("round", "acc", "miou", "bytes_up", "bytes_down", "lambda", "rollbacks")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FederationConfig:
    """Everything the round loop needs; a run is a pure function of this + data."""

    num_clients: int
    rounds: int = 50
    local_iters: int = 10
    batch_size: int = 16
    client_fraction: float = 1.0
    upload_ratio: float = 1.0
    lambda_target: float = LAMBDA_ADV_DEFAULT
    warmup_rounds: int = 5
    rollback_drop_threshold: float = 0.05
    clip_norm: float = 1.0
    use_proto: bool = True
    use_multicon: bool = True
    use_adv: bool = True
    algorithm: str = "fedsaas"
    seed: int = 0
    learning_rate: float = 0.05
    disc_learning_rate: float = 0.05
    server_learning_rate: float = 0.05
    weight_decay: float = 5e-4
    distill_batch: int = 64
    intra_period: int = 5
    inter_anchors: int = 2
    proto_max_images: int = 64
    tau: float = TAU_DEFAULT
    k_ch: int = K_CH_DEFAULT

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_iters < 1 or self.batch_size < 1:
            raise ConfigError("local_iters and batch_size must be >= 1")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError("client_fraction must be in (0, 1]")
        if not 0.0 < self.upload_ratio <= 1.0:
            raise ConfigError("upload_ratio must be in (0, 1]")
        if self.lambda_target < 0:
            raise ConfigError("lambda_target must be non-negative")
        if self.warmup_rounds < 1:
            raise ConfigError("warmup_rounds must be >= 1")
        if self.rollback_drop_threshold <= 0:
            raise ConfigError("rollback_drop_threshold must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.algorithm == "fedavg" and (self.use_proto or self.use_multicon or self.use_adv):
            raise ConfigError("fedavg is the plain parameter-averaging baseline; feature flags must be off")
        if min(self.learning_rate, self.disc_learning_rate, self.server_learning_rate) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.distill_batch < 1 or self.intra_period < 1 or self.inter_anchors < 1:
            raise ConfigError("distill_batch, intra_period and inter_anchors must be >= 1")
        if self.proto_max_images < 1:
            raise ConfigError("proto_max_images must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.k_ch < 1:
            raise ConfigError("k_ch must be >= 1")


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass
class ServerState:
    model: TwoBranchModel  # only the global branch is ever trained
    generator: WeightGenerator
    store: ExemplarStore
    num_classes: int
    prototypes: Optional[np.ndarray] = None  # (C, k_ch)
    proto_stats: Optional[CooccurrenceStats] = None
    best_metric: float = float("-inf")
    best_checkpoint: Optional[dict] = None
    round_index: int = 0


@dataclass
class ClientState:
    client_id: int
    model: TwoBranchModel
    disc: Discriminator
    generator: WeightGenerator  # holds broadcast f_w values for kernel install
    data: ClientData
    exemplars: List[ClassExemplar] = field(default_factory=list)  # full local set
    soft_targets: Optional[np.ndarray] = None  # (n_train, C, H/4, W/4)


@dataclass(frozen=True)
class Broadcast:
    """Round-start downlink payloads, all as serialized bytes."""

    head: Optional[bytes] = None
    prototypes: Optional[bytes] = None
    generator: Optional[bytes] = None
    full_model: Optional[bytes] = None

    @property
    def nbytes(self) -> int:
        return sum(len(b) for b in (self.head, self.prototypes, self.generator, self.full_model) if b)


@dataclass
class ClientRoundResult:
    client_id: int
    upload: Optional[bytes]  # serialized branch (or full model); None if the round failed
    failed: bool
    loss_sums: Dict[str, float]
    loss_counts: Dict[str, int]
    note: str = ""


@dataclass
class RoundRecord:
    """One ledger entry; the JSONL file is exactly these, in order."""

    round: int
    lambda_t: float
    bytes_up: int
    bytes_down: int
    selected: List[int]
    failed: List[int]
    client_losses: Dict[str, float]
    distill_loss: Optional[float]
    inter_loss: Optional[float]
    skipped_exemplars: int
    val_miou: Dict[int, float]
    mean_miou: float
    mean_acc: float
    rolled_back: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "lambda": self.lambda_t,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "selected": list(self.selected),
            "failed": list(self.failed),
            "client_losses": {k: self.client_losses[k] for k in sorted(self.client_losses)},
            "distill_loss": self.distill_loss,
            "inter_loss": self.inter_loss,
            "skipped_exemplars": self.skipped_exemplars,
            "val_miou": {str(c): self.val_miou[c] for c in sorted(self.val_miou)},
            "mean_miou": self.mean_miou,
            "mean_acc": self.mean_acc,
            "rolled_back": self.rolled_back,
            "note": self.note,
        }


@dataclass
class RunResult:
    config: FederationConfig
    server: ServerState
    clients: List[ClientState]
    records: List[RoundRecord]  # index 0 is the setup entry
    reports: Dict[str, EvalReport]  # final per-mode evaluation
    unseen_report: Optional[EvalReport] = None


# ---------------------------------------------------------------------------
# Setup
# ---------------------------------------------------------------------------


def soft_block_targets(images: Sequence[LabeledImage], num_classes: int, factor: int = 4) -> np.ndarray:
    """Per-image class histograms over factor x factor mask blocks, (N, C, H/f, W/f).

    Cross-entropy of feature-resolution logits against these equals
    full-resolution cross-entropy of nearest-upsampled logits exactly, so
    training never needs the upsampled graph.
    """
    masks = np.stack([img.mask for img in images])
    n, height, width = masks.shape
    if height % factor or width % factor:
        raise ContractError(f"image sides must be multiples of {factor} for block targets")
    one_hot = (masks[:, None] == np.arange(num_classes)[None, :, None, None]).astype(np.float64)
    return one_hot.reshape(n, num_classes, height // factor, factor, width // factor, factor).mean(axis=(3, 5))


def setup(config: FederationConfig, split: FederationSplit) -> Tuple[ServerState, List[ClientState], int]:
    """Initialize server + clients and perform the one-time exemplar upload.

    Returns (server, clients, uploaded_exemplar_bytes).  All models start from
    the same seeded initialization, so no initial weight broadcast is needed
    (or counted).
    """
    if len(split.clients) != config.num_clients:
        raise SetupError(
            f"config expects {config.num_clients} clients but the split has {len(split.clients)}"
        )
    for data in split.clients:
        if not data.train or not data.val:
            raise SetupError(f"client {data.client_id} has an empty train or val set")

    num_classes = split.clients[0].train[0].num_classes
    server = ServerState(
        model=TwoBranchModel(num_classes, config.seed, config.k_ch),
        generator=WeightGenerator(config.k_ch, config.seed),
        store=ExemplarStore(),
        num_classes=num_classes,
    )

    clients: List[ClientState] = []
    for data in sorted(split.clients, key=lambda d: d.client_id):
        clients.append(
            ClientState(
                client_id=data.client_id,
                model=TwoBranchModel(num_classes, config.seed, config.k_ch),
                disc=Discriminator(num_classes, config.seed),
                generator=WeightGenerator(config.k_ch, config.seed),
                data=data,
                soft_targets=soft_block_targets(data.train, num_classes),
            )
        )

    exemplar_bytes = 0
    if config.algorithm == "fedsaas":
        fcn = ExemplarFcn(config.seed)
        for client in clients:
            own = [ex for img in client.data.train for ex in extract_exemplars(fcn, img)]
            if not own:
                raise SetupError(f"client {client.client_id} produced no exemplars")
            client.exemplars = own
            rng = np.random.default_rng([config.seed, _STREAM_UPLOAD, client.client_id])
            for ex in select_upload(own, config.upload_ratio, rng):
                blob = serialize_exemplar(ex)
                exemplar_bytes += len(blob)
                server.store.add(deserialize_exemplar(blob))
        server.store.freeze()
        if config.use_proto:
            _regenerate_prototypes(server, config, round_idx=0)

    return server, clients, exemplar_bytes


def lambda_schedule(t: int, config: FederationConfig) -> float:
    """Adversarial weight ramp: 0 before training, linear to the target."""
    if t <= 0:
        return 0.0
    return config.lambda_target * min(1.0, t / config.warmup_rounds)


# ---------------------------------------------------------------------------
# Client round
# ---------------------------------------------------------------------------


def _apply_broadcast(client: ClientState, broadcast: Broadcast, config: FederationConfig) -> None:
    if config.algorithm == "fedavg":
        client.model.set_all(deserialize_params(broadcast.full_model))
        return
    client.model.set_global_head(deserialize_params(broadcast.head))
    if broadcast.prototypes is not None:
        rows = deserialize_params(broadcast.prototypes)
        matrix = np.stack([rows[f"class{c}"] for c in range(client.model.num_classes)])
        assign_params(client.generator.params, deserialize_params(broadcast.generator))
        client.model.install_prototype_conv(matrix, client.generator)
    else:
        client.model.clear_prototype_conv()


def _snapshot_client(client: ClientState) -> Dict[str, np.ndarray]:
    snap = {f"m.{k}": v.data.copy() for k, v in client.model.all_params().items()}
    snap.update({f"d.{k}": v.data.copy() for k, v in client.disc.params.items()})
    return snap


def _restore_client(client: ClientState, snap: Dict[str, np.ndarray]) -> None:
    for k, p in client.model.all_params().items():
        p.data[:] = snap[f"m.{k}"]
    for k, p in client.disc.params.items():
        p.data[:] = snap[f"d.{k}"]
    client.disc.set_trainable(True)
    ad.zero_grads(client.model.all_params().values())
    ad.zero_grads(client.disc.params.values())


def client_round(
    client: ClientState, broadcast: Broadcast, lambda_t: float, config: FederationConfig, round_idx: int
) -> ClientRoundResult:
    """One client's local training pass; returns its serialized upload.

    The server head overwrites the client's and stays frozen for the whole
    round (only extractors, the local head, and the discriminator step).  A
    non-finite loss aborts the round: the client restores its round-start
    snapshot and reports failure instead of uploading.
    """
    rng = np.random.default_rng([config.seed, _STREAM_CLIENT_ROUND, client.client_id, round_idx])
    _apply_broadcast(client, broadcast, config)
    snapshot = _snapshot_client(client)

    model = client.model
    if config.algorithm == "fedavg":
        trainable = list(model.all_params().values())
    else:
        trainable = (
            list(model.global_extractor.values())
            + list(model.local_extractor.values())
            + list(model.local_head.values())
        )
    branch_cfg = ad.SgdConfig(config.learning_rate, config.weight_decay, clip_norm=None)
    disc_cfg = ad.SgdConfig(config.disc_learning_rate, config.weight_decay, clip_norm=config.clip_norm)

    sums: Dict[str, float] = {}
    counts: Dict[str, int] = {}

    def tally(key: str, value: float) -> None:
        sums[key] = sums.get(key, 0.0) + value
        counts[key] = counts.get(key, 0) + 1

    def abort(note: str) -> ClientRoundResult:
        _restore_client(client, snapshot)
        ad.reset_tape()
        return ClientRoundResult(client.client_id, None, True, {}, {}, note=note)

    n_train = len(client.data.train)

    def one_iteration(it: int) -> Optional[str]:
        """Run local iteration `it`; returns a failure note instead of raising."""
        take = min(config.batch_size, n_train)
        idx = rng.choice(n_train, size=take, replace=False)
        x = ad.Tensor(np.stack([client.data.train[int(i)].image for i in idx]))
        targets = client.soft_targets[idx]

        ad.reset_tape()
        z_global = model.logits_from_features("global", model.features("global", x))
        z_local = model.logits_from_features("local", model.features("local", x))
        seg_global = ad.softmax_cross_entropy_soft(z_global, targets)
        seg_local = ad.softmax_cross_entropy_soft(z_local, targets)
        if not (np.isfinite(seg_global.item()) and np.isfinite(seg_local.item())):
            return f"non-finite segmentation loss at local iteration {it}"

        adv_global = adv_local = None
        if config.use_adv:
            # Stage one: discriminator step on detached pooled logits.
            pooled = ad.concat(
                [ad.global_avg_pool(z_global.detach()), ad.global_avg_pool(z_local.detach())]
            )
            labels = np.concatenate([np.ones(take), np.zeros(take)])
            d_loss = discriminator_loss(client.disc.forward(pooled), labels)
            ad.backward(d_loss)
            ad.sgd_step(client.disc.params.values(), disc_cfg)
            if not np.isfinite(d_loss.item()):
                return f"non-finite discriminator loss at local iteration {it}"
            tally("disc", d_loss.item())
            # Stage two: branches try to confuse the (now frozen) discriminator.
            client.disc.set_trainable(False)
            adv_global = confusion_loss(client.disc.forward(ad.global_avg_pool(z_global)), np.ones(take))
            adv_local = confusion_loss(client.disc.forward(ad.global_avg_pool(z_local)), np.zeros(take))
            client.disc.set_trainable(True)

        intra = None
        if config.use_multicon and it % config.intra_period == 0 and client.exemplars:
            intra = contrastive_loss(
                model.local_extractor,
                client.exemplars,
                rng,
                config.tau,
                cross_client_positives=False,
                n_anchors=1,
            )

        if config.use_adv:
            loss_global, loss_local = branch_losses(
                seg_global, seg_local, adv_global, adv_local, intra, lambda_t
            )
            tally("adv_global", adv_global.item())
            tally("adv_local", adv_local.item())
        else:
            loss_global = seg_global
            loss_local = seg_local + intra if intra is not None else seg_local
        tally("seg_global", seg_global.item())
        tally("seg_local", seg_local.item())
        if intra is not None:
            tally("intra", intra.item())

        total = loss_global + loss_local
        if not np.isfinite(total.item()):
            return f"non-finite branch loss at local iteration {it}"
        ad.backward(total)
        ad.sgd_step(trainable, branch_cfg)
        # The frozen server head accumulates grads it never uses; drop them.
        ad.zero_grads(model.global_head.values())
        return None

    for it in range(config.local_iters):
        try:
            failure = one_iteration(it)
        except NumericFaultError as exc:
            failure = f"numeric fault at local iteration {it}: {exc}"
        if failure is not None:
            return abort(failure)

    ad.reset_tape()
    if config.algorithm == "fedavg":
        upload = serialize_params(model.all_params())
    else:
        upload = serialize_params(model.global_branch_params())
    return ClientRoundResult(client.client_id, upload, False, sums, counts)


# ---------------------------------------------------------------------------
# Server phases
# ---------------------------------------------------------------------------


def aggregate_global(uploads: Sequence[Tuple[int, Dict[str, np.ndarray]]]) -> Dict[str, np.ndarray]:
    """Element-wise mean of uploaded parameter dicts, reduced in sorted-id order."""
    if not uploads:
        raise ContractError("aggregate_global needs at least one upload")
    ordered = sorted(uploads, key=lambda kv: kv[0])
    names = sorted(ordered[0][1])
    out = {k: ordered[0][1][k].astype(np.float64).copy() for k in names}
    for cid, values in ordered[1:]:
        if sorted(values) != names:
            raise ContractError(f"upload from client {cid} has a different parameter set")
        for k in names:
            if values[k].shape != out[k].shape:
                raise ContractError(f"upload from client {cid} has a mismatched shape for {k}")
            out[k] += values[k]
    n = len(ordered)
    return {k: v / n for k, v in out.items()}


def _branch_forward_values(values: Dict[str, np.ndarray], batch: np.ndarray) -> np.ndarray:
    """Pooled logits (B, C) of a serialized global branch on exemplar maps."""
    ext = {k[len("ext."):]: ad.Tensor(v) for k, v in values.items() if k.startswith("ext.")}
    head = {k: ad.Tensor(v) for k, v in values.items() if k.startswith("head.")}
    with ad.no_grad():
        z = head_forward(head, extractor_forward(ext, ad.Tensor(batch)))
    return z.data.mean(axis=(2, 3))


@dataclass
class DistillResult:
    distill_loss: Optional[float]
    inter_loss: Optional[float]
    skipped: int
    used: int


def server_distill(
    server: ServerState,
    uploads: Dict[int, Dict[str, np.ndarray]],
    config: FederationConfig,
    round_idx: int,
) -> DistillResult:
    """One server step: similarity-weighted ensemble distillation (+ the
    cross-client contrastive term) on a sampled exemplar batch.

    Teachers are the uploaded client branches evaluated on exemplars from
    *other* clients; exemplars whose peer pool is empty are skipped.  The step
    trains the server extractor, head, and (when prototypes are active) the
    kernel generator, which contributes rows to the server's own logits.
    """
    if len(server.store) == 0:
        raise ContractError("server_distill needs a non-empty exemplar store")
    rng = np.random.default_rng([config.seed, _STREAM_DISTILL, round_idx])
    all_exemplars = list(server.store)
    take = min(config.distill_batch, len(all_exemplars))
    picked = sorted(rng.choice(len(all_exemplars), size=take, replace=False))
    batch = [all_exemplars[int(i)] for i in picked]

    teacher_ids = sorted(uploads)
    kept = [ex for ex in batch if any(cid != ex.client_id for cid in teacher_ids)]
    skipped = len(batch) - len(kept)

    ad.reset_tape()
    distill_part = None
    if kept:
        shapes = {ex.feature.shape for ex in kept}
        if len(shapes) != 1:
            raise ContractError("distillation batch exemplars must share a shape")
        maps = np.stack([ex.feature for ex in kept])
        teacher = {cid: _branch_forward_values(uploads[cid], maps) for cid in teacher_ids}

        rows = None
        if config.use_proto and server.prototypes is not None:
            rows = server.generator.forward(ad.Tensor(server.prototypes))
        feats = extractor_forward(server.model.global_extractor, ad.Tensor(maps))
        z = server.model.logits_from_features("global", feats, proto_rows=rows)
        pooled = ad.global_avg_pool(z)  # (B, C), differentiable

        aggregates = np.empty_like(pooled.data)
        for b, ex in enumerate(kept):
            logits_b = [(cid, teacher[cid][b]) for cid in teacher_ids]
            aggregates[b] = make_distill_batch(ex, logits_b, pooled.data[b]).aggregate
        distill_part = distill_loss(pooled, aggregates)

    inter_part = None
    if config.use_multicon:
        inter_part = contrastive_loss(
            server.model.global_extractor,
            all_exemplars,
            rng,
            config.tau,
            cross_client_positives=True,
            n_anchors=config.inter_anchors,
        )

    parts = [p for p in (distill_part, inter_part) if p is not None]
    if not parts:
        return DistillResult(None, None, skipped, len(kept))
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    ad.backward(total)
    candidates = list(server.model.global_branch_params().values()) + list(server.generator.params.values())
    ad.sgd_step(
        [p for p in candidates if p.grad is not None],
        ad.SgdConfig(config.server_learning_rate, config.weight_decay, clip_norm=None),
    )
    ad.zero_grads(candidates)
    ad.reset_tape()
    return DistillResult(
        distill_part.item() if distill_part is not None else None,
        inter_part.item() if inter_part is not None else None,
        skipped,
        len(kept),
    )


def _regenerate_prototypes(server: ServerState, config: FederationConfig, round_idx: int) -> int:
    rng = np.random.default_rng([config.seed, _STREAM_PROTO, round_idx])
    matrix, stats, skipped = build_prototypes(
        server.model.global_extractor,
        server.store,
        server.num_classes,
        config.k_ch,
        rng,
        max_images=config.proto_max_images,
    )
    server.prototypes = matrix
    server.proto_stats = stats
    return skipped


# ---------------------------------------------------------------------------
# Stability: best checkpoint + rollback
# ---------------------------------------------------------------------------


def state_hash(server: ServerState, clients: Sequence[ClientState]) -> str:
    """Digest of every trainable parameter, in a fixed order."""
    h = hashlib.sha256()
    h.update(serialize_params(server.model.global_branch_params()))
    h.update(serialize_params(server.generator.params))
    for client in sorted(clients, key=lambda c: c.client_id):
        h.update(serialize_params(client.model.all_params()))
        h.update(serialize_params(client.disc.params))
    return h.hexdigest()


def capture_checkpoint(server: ServerState, clients: Sequence[ClientState], metric: float, round_idx: int) -> dict:
    return {
        "round": round_idx,
        "metric": metric,
        "hash": state_hash(server, clients),
        "server_global": {k: v.data.copy() for k, v in server.model.global_branch_params().items()},
        "generator": {k: v.data.copy() for k, v in server.generator.params.items()},
        "prototypes": None if server.prototypes is None else server.prototypes.copy(),
        "proto_stats": server.proto_stats,
        "clients": {
            c.client_id: {
                "model": {k: v.data.copy() for k, v in c.model.all_params().items()},
                "disc": {k: v.data.copy() for k, v in c.disc.params.items()},
                "proto_rows": None if c.model.proto_rows is None else c.model.proto_rows.copy(),
            }
            for c in clients
        },
    }


def restore_checkpoint(server: ServerState, clients: Sequence[ClientState], checkpoint: dict) -> None:
    assign_params(server.model.global_branch_params(), checkpoint["server_global"])
    assign_params(server.generator.params, checkpoint["generator"])
    server.prototypes = None if checkpoint["prototypes"] is None else checkpoint["prototypes"].copy()
    server.proto_stats = checkpoint["proto_stats"]
    for client in clients:
        saved = checkpoint["clients"][client.client_id]
        client.model.set_all(saved["model"])
        assign_params(client.disc.params, saved["disc"])
        client.model.proto_rows = None if saved["proto_rows"] is None else saved["proto_rows"].copy()


def stability_check(
    server: ServerState, clients: Sequence[ClientState], mean_miou: float, config: FederationConfig
) -> bool:
    """Roll back to the best checkpoint on a sharp validation drop.

    Returns True when a rollback happened.  Otherwise the checkpoint is
    refreshed whenever the metric improves (strictly).
    """
    if (
        server.best_checkpoint is not None
        and mean_miou < server.best_metric - config.rollback_drop_threshold
    ):
        restore_checkpoint(server, clients, server.best_checkpoint)
        return True
    if server.best_checkpoint is None or mean_miou > server.best_metric:
        server.best_metric = mean_miou
        server.best_checkpoint = capture_checkpoint(server, clients, mean_miou, server.round_index)
    return False


# ---------------------------------------------------------------------------
# Round loop
# ---------------------------------------------------------------------------


def _make_broadcast(server: ServerState, config: FederationConfig) -> Broadcast:
    if config.algorithm == "fedavg":
        return Broadcast(full_model=serialize_params(server.model.all_params()))
    head = serialize_params(server.model.global_head)
    if config.use_proto and server.prototypes is not None:
        return Broadcast(
            head=head,
            prototypes=serialize_params(
                {f"class{c}": server.prototypes[c] for c in range(server.num_classes)}
            ),
            generator=serialize_params(server.generator.params),
        )
    return Broadcast(head=head)


def _select_clients(clients: Sequence[ClientState], config: FederationConfig, round_idx: int) -> List[int]:
    ids = sorted(c.client_id for c in clients)
    if config.client_fraction >= 1.0:
        return ids
    k = max(1, int(round(config.client_fraction * len(ids))))
    rng = np.random.default_rng([config.seed, _STREAM_SELECTION, round_idx])
    picked = rng.choice(len(ids), size=k, replace=False)
    return sorted(ids[int(i)] for i in picked)


def evaluate_round(clients: Sequence[ClientState], mode: str = "fused") -> Tuple[float, float, Dict[int, float]]:
    """(mean mIoU, mean accuracy, per-client mIoU) over clients' own val sets."""
    per_client: Dict[int, float] = {}
    accs = []
    for client in sorted(clients, key=lambda c: c.client_id):
        report = evaluate_client(client.model, client.data.val, mode)
        per_client[client.client_id] = report.miou
        accs.append(report.pixel_acc)
    return float(np.mean(list(per_client.values()))), float(np.mean(accs)), per_client


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    config: FederationConfig,
    round_idx: int,
    executor: ThreadPoolExecutor,
    val_metric_hook: Optional[Callable[[int, float], float]] = None,
) -> RoundRecord:
    """One full communication round; see the module docstring for the phases."""
    server.round_index = round_idx
    lambda_t = lambda_schedule(round_idx, config)
    broadcast = _make_broadcast(server, config)
    selected = _select_clients(clients, config, round_idx)
    by_id = {c.client_id: c for c in clients}

    futures = [
        executor.submit(client_round, by_id[cid], broadcast, lambda_t, config, round_idx)
        for cid in selected
    ]
    results = sorted((f.result() for f in futures), key=lambda r: r.client_id)
    ok = [r for r in results if not r.failed]
    failed = [r.client_id for r in results if r.failed]

    bytes_down = broadcast.nbytes
    bytes_up = sum(len(r.upload) for r in ok)
    note = "; ".join(f"client {r.client_id}: {r.note}" for r in results if r.failed)

    distill = DistillResult(None, None, 0, 0)
    if ok:
        uploads = {r.client_id: deserialize_params(r.upload) for r in ok}
        aggregate = aggregate_global(sorted(uploads.items()))
        if config.algorithm == "fedavg":
            server.model.set_all(aggregate)
        else:
            server.model.set_global_branch(aggregate)
            distill = server_distill(server, uploads, config, round_idx)
            if config.use_proto:
                _regenerate_prototypes(server, config, round_idx)
    else:
        note = ("no successful client rounds; " + note).rstrip("; ")

    mean_miou, mean_acc, per_client = evaluate_round(clients)
    if val_metric_hook is not None:
        mean_miou = float(val_metric_hook(round_idx, mean_miou))
    rolled_back = stability_check(server, clients, mean_miou, config)

    loss_sums: Dict[str, float] = {}
    loss_counts: Dict[str, int] = {}
    for r in ok:
        for key, value in r.loss_sums.items():
            loss_sums[key] = loss_sums.get(key, 0.0) + value
            loss_counts[key] = loss_counts.get(key, 0) + r.loss_counts[key]
    client_losses = {k: loss_sums[k] / loss_counts[k] for k in loss_sums}

    return RoundRecord(
        round=round_idx,
        lambda_t=lambda_t,
        bytes_up=bytes_up,
        bytes_down=bytes_down,
        selected=selected,
        failed=failed,
        client_losses=client_losses,
        distill_loss=distill.distill_loss,
        inter_loss=distill.inter_loss,
        skipped_exemplars=distill.skipped,
        val_miou=per_client,
        mean_miou=mean_miou,
        mean_acc=mean_acc,
        rolled_back=rolled_back,
        note=note,
    )


def evaluate_federation(clients: Sequence[ClientState], mode: str = "fused") -> EvalReport:
    """Cross-client report: each client on its own validation set, averaged."""
    per_client = {
        c.client_id: evaluate_client(c.model, c.data.val, mode)
        for c in sorted(clients, key=lambda c: c.client_id)
    }
    ious = np.stack([r.per_class_iou for r in per_client.values()])
    with np.errstate(invalid="ignore"):
        mean_iou = np.nanmean(ious, axis=0)
    return EvalReport(
        per_class_iou=mean_iou,
        miou=float(np.mean([r.miou for r in per_client.values()])),
        pixel_acc=float(np.mean([r.pixel_acc for r in per_client.values()])),
        per_client=per_client,
    )


def run_federation(
    config: FederationConfig,
    split: FederationSplit,
    workers: int = 1,
    out_dir: Optional[str] = None,
    val_metric_hook: Optional[Callable[[int, float], float]] = None,
) -> RunResult:
    """Setup + the full round loop + final evaluation (+ artifacts when out_dir).

    `val_metric_hook(round, miou) -> miou` intercepts the validation metric
    before the stability check; it exists so tests can inject synthetic drops
    through the real rollback path.
    """
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    server, clients, exemplar_bytes = setup(config, split)

    mean_miou, mean_acc, per_client = evaluate_round(clients)
    records = [
        RoundRecord(
            round=0,
            lambda_t=lambda_schedule(0, config),
            bytes_up=exemplar_bytes,
            bytes_down=0,
            selected=[],
            failed=[],
            client_losses={},
            distill_loss=None,
            inter_loss=None,
            skipped_exemplars=0,
            val_miou=per_client,
            mean_miou=mean_miou,
            mean_acc=mean_acc,
            rolled_back=False,
            note="setup: one-time exemplar upload",
        )
    ]

    with ThreadPoolExecutor(max_workers=workers) as executor:
        for t in range(1, config.rounds + 1):
            records.append(run_round(server, clients, config, t, executor, val_metric_hook))

    reports = {mode: evaluate_federation(clients, mode) for mode in ("fused", "global_only", "local_only")}
    unseen_report = None
    if split.unseen:
        unseen_report = evaluate_unseen({c.client_id: c.model for c in clients}, split.unseen)

    result = RunResult(
        config=config,
        server=server,
        clients=list(clients),
        records=records,
        reports=reports,
        unseen_report=unseen_report,
    )
    if out_dir is not None:
        write_run_artifacts(result, out_dir)
    return result


# ---------------------------------------------------------------------------
# Artifacts: ledger JSONL, summary CSV, eval JSON, checkpoint directory
# ---------------------------------------------------------------------------


def summary_lines(records: Sequence[RoundRecord]) -> List[str]:
    """CSV lines (header + one row per training round, excluding setup)."""
    lines = [",".join(SUMMARY_COLUMNS)]
    for rec in records:
        if rec.round == 0:
            continue
        lines.append(
            ",".join(
                [
                    str(rec.round),
                    repr(rec.mean_acc),
                    repr(rec.mean_miou),
                    str(rec.bytes_up),
                    str(rec.bytes_down),
                    repr(rec.lambda_t),
                    str(int(rec.rolled_back)),
                ]
            )
        )
    return lines


def write_run_artifacts(result: RunResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ledger.jsonl"), "w") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write("\n".join(summary_lines(result.records)) + "\n")

    evals = {mode: report.to_dict() for mode, report in result.reports.items()}
    if result.unseen_report is not None:
        evals["unseen"] = result.unseen_report.to_dict()
    evals["config"] = asdict(result.config)
    with open(os.path.join(out_dir, "eval.json"), "w") as fh:
        json.dump(evals, fh, indent=2, sort_keys=True)

    if result.server.best_checkpoint is not None:
        write_checkpoint(result.server.best_checkpoint, os.path.join(out_dir, "checkpoints", "best"), result.config)


def write_checkpoint(checkpoint: dict, ckpt_dir: str, config: FederationConfig) -> None:
    """Parameter blobs + a JSON manifest describing them."""
    os.makedirs(ckpt_dir, exist_ok=True)
    files = {
        "server_global.bin": serialize_params(checkpoint["server_global"]),
        "generator.bin": serialize_params(checkpoint["generator"]),
    }
    for cid, saved in sorted(checkpoint["clients"].items()):
        files[f"client_{cid}_model.bin"] = serialize_params(saved["model"])
        files[f"client_{cid}_disc.bin"] = serialize_params(saved["disc"])
        if saved["proto_rows"] is not None:
            # The installed auxiliary kernel rows change global-branch logits,
            # so offline evaluation needs them alongside the weights.
            files[f"client_{cid}_proto.bin"] = serialize_params({"rows": saved["proto_rows"]})
    for name, blob in files.items():
        with open(os.path.join(ckpt_dir, name), "wb") as fh:
            fh.write(blob)
    manifest = {
        "round": checkpoint["round"],
        "metric": checkpoint["metric"],
        "hash": checkpoint["hash"],
        "num_classes": int(next(iter(checkpoint["clients"].values()))["model"]["g.head.w"].shape[0])
        if checkpoint["clients"]
        else None,
        "k_ch": config.k_ch,
        "seed": config.seed,
        "clients": sorted(checkpoint["clients"]),
        "files": sorted(files),
    }
    with open(os.path.join(ckpt_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir: str) -> dict:
    """Manifest plus deserialized parameter dicts, keyed like write_checkpoint."""
    with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = {"manifest": manifest, "files": {}}
    for name in manifest["files"]:
        with open(os.path.join(ckpt_dir, name), "rb") as fh:
            out["files"][name] = deserialize_params(fh.read())
    return out


# ---------------------------------------------------------------------------
# Branch-separability probe
# ---------------------------------------------------------------------------


def probe_branch_separability(
    clients: Sequence[ClientState],
    seed: int,
    steps: int = 200,
    learning_rate: float = 0.5,
) -> float:
    """Train a fresh discriminator to tell branches apart on held-out logits.

    Returns held-out accuracy over a balanced global/local pool: near 0.5
    means the branches are indistinguishable, near 1.0 means fully separable.
    """
    pooled_chunks, label_chunks = [], []
    num_classes = None
    for client in sorted(clients, key=lambda c: c.client_id):
        num_classes = client.model.num_classes
        x = ad.Tensor(np.stack([img.image for img in client.data.val]))
        with ad.no_grad():
            zg = client.model.logits_from_features("global", client.model.features("global", x))
            zl = client.model.logits_from_features("local", client.model.features("local", x))
        pooled_chunks.append(zg.data.mean(axis=(2, 3)))
        label_chunks.append(np.ones(len(client.data.val)))
        pooled_chunks.append(zl.data.mean(axis=(2, 3)))
        label_chunks.append(np.zeros(len(client.data.val)))
    pooled = np.concatenate(pooled_chunks)
    labels = np.concatenate(label_chunks)

    rng = np.random.default_rng([seed, _STREAM_PROBE])
    order = rng.permutation(len(pooled))
    half = len(order) // 2
    train_x, train_y = pooled[order[:half]], labels[order[:half]]
    test_x, test_y = pooled[order[half:]], labels[order[half:]]

    probe = Discriminator(num_classes, seed + 1_000_003)
    cfg = ad.SgdConfig(learning_rate, weight_decay=0.0, clip_norm=1.0)
    for _ in range(steps):
        ad.reset_tape()
        loss = discriminator_loss(probe.forward(ad.Tensor(train_x)), train_y)
        ad.backward(loss)
        ad.sgd_step(probe.params.values(), cfg)
    ad.reset_tape()
    with ad.no_grad():
        p = probe.forward(ad.Tensor(test_x)).data
    return float(np.mean((p > 0.5) == (test_y > 0.5)))
