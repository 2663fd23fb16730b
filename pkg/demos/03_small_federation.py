#!/usr/bin/env python3
"""Train a small federation end to end and compare against plain averaging.

Two clients, 16x16 scenes, a handful of rounds — small enough to finish in
well under a minute, large enough to show the moving parts: the round-zero
exemplar upload, per-round communication, the adversarial weight ramp,
rollbacks, and the final three-way evaluation (fused / global / local).
"""

import numpy as np

from fedsegsim.config import experiment_split, from_dict
from fedsegsim.federation import probe_branch_separability, run_federation

BASE = {
    "seed": 11,
    "data": {"num_clients": 2, "num_classes": 4, "size": 16, "n_train": 24, "n_val": 8},
    "model": {"k_ch": 8},
    "federation": {"rounds": 8, "local_iters": 4, "batch_size": 8, "distill_batch": 16},
}


def train(label, **federation_overrides):
    raw = {**BASE, "federation": {**BASE["federation"], **federation_overrides}}
    cfg = from_dict(raw)
    split = experiment_split(cfg)
    result = run_federation(cfg.federation, split)
    return cfg, result


# --- 1. the full protocol ----------------------------------------------------
cfg, result = train("full")
print("full protocol: 2 clients, 4 classes, 16x16, 8 rounds")
print()
print("round  lambda  bytes_up  bytes_down  val_miou  rolled_back")
for rec in result.records:
    print(
        f"{rec.round:5d}  {rec.lambda_t:6.2f}  {rec.bytes_up:8d}  {rec.bytes_down:10d}"
        f"  {rec.mean_miou:8.4f}  {str(rec.rolled_back):>11}"
    )
print()
print("round 0 is the one-time exemplar upload (nothing comes down);")
print("afterwards every round uploads each client's global branch and")
print("multicasts one head+prototypes+generator package back.")
print()

print("final evaluation over client validation sets:")
for mode in ("fused", "global_only", "local_only"):
    rep = result.reports[mode]
    print(f"  {mode:12s}  mIoU {rep.miou:.4f}  pixel acc {rep.pixel_acc:.4f}")
probe = probe_branch_separability(result.clients, cfg.seed)
print(f"branch separability probe (0.5 = indistinguishable): {probe:.3f}")
print()

# --- 2. plain parameter averaging with the same budget ----------------------
_, avg = train("fedavg", algorithm="fedavg", use_proto=False, use_multicon=False, use_adv=False)
print("same data and rounds, plain parameter averaging:")
print(f"  fedavg        mIoU {avg.reports['fused'].miou:.4f}  "
      f"pixel acc {avg.reports['fused'].pixel_acc:.4f}")
print()
delta = result.reports["fused"].miou - avg.reports["fused"].miou
print(f"fused-protocol minus fedavg mIoU at this tiny scale: {delta:+.4f}")
print("(heterogeneity is mild with 2 clients; the gap grows with the")
print(" 4-client severe preset used by the acceptance suite)")
