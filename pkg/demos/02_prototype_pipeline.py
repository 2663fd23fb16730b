#!/usr/bin/env python3
"""Step-by-step walk through the class-prototype pipeline on one tiny split.

This is the path the server takes at setup time, done by hand so each
intermediate object can be printed: masked class exemplars come in, a
correlation-mixed unit prototype per class comes out, and a tiny generator
network turns those prototypes into auxiliary classifier rows.
"""

import numpy as np

import fedsegsim.autodiff as ad
from fedsegsim.config import experiment_split, from_dict
from fedsegsim.exemplars import ExemplarFcn, extract_exemplars, serialize_exemplar, to_vector
from fedsegsim.models import TwoBranchModel, WeightGenerator
from fedsegsim.prototypes import (
    compose_prototypes,
    cooccurrence,
    correlation,
    distribution_vector,
    embed_exemplars,
    rarity_weights,
)

C, K = 5, 8
cfg = from_dict(
    {
        "seed": 3,
        "data": {"num_clients": 2, "num_classes": C, "size": 16, "n_train": 12, "n_val": 4},
        "model": {"k_ch": K},
    }
)
split = experiment_split(cfg)

# --- 1. clients turn images into per-class masked feature maps --------------
fcn = ExemplarFcn(cfg.seed)  # frozen, shared by construction (same seed)
exemplars = []
for client in split.clients:
    for img in client.train:
        exemplars.extend(extract_exemplars(fcn, img))
print(f"extracted {len(exemplars)} class exemplars from "
      f"{sum(len(c.train) for c in split.clients)} images")
one = exemplars[1]
print(f"one exemplar: class {one.class_id}, client {one.client_id}, "
      f"feature map {one.feature.shape}, {one.active_pixels} active pixels, "
      f"{len(serialize_exemplar(one))} bytes on the wire")
vec = to_vector(one)
print(f"as a unit vector: {np.round(vec.v, 3)}")
print()

# --- 2. rarity weighting: scarce classes get pulled up ----------------------
counts = {}
for ex in exemplars:
    counts[ex.class_id] = counts.get(ex.class_id, 0) + 1
beta = rarity_weights(counts)
print("exemplar count and rarity weight per class:")
for c in sorted(counts):
    print(f"  class {c}: {counts[c]:3d} exemplars  beta={beta[c]:.3f}")
print()

# --- 3. embed into branch feature space, pool into distribution vectors -----
server_model = TwoBranchModel(C, seed=cfg.seed, k_ch=K)
deeps, skipped = embed_exemplars(server_model.global_extractor, exemplars)
if skipped:
    print(f"({skipped} exemplars had no active cells at feature resolution and were skipped)")
by_class = {}
for d in deeps:
    by_class.setdefault(d.class_id, []).append(d)
vectors = {c: distribution_vector(ds, beta[c]) for c, ds in by_class.items()}
print(f"distribution vectors: {len(vectors)} classes, dim {K}")
print()

# --- 4. spatial statistics: which classes appear near which ----------------
phi = cooccurrence(deeps, C)
R = correlation(deeps, phi, C)
np.set_printoptions(precision=2, suppress=True)
print("co-occurrence phi[c,c'] (how often c' sits within radius 2 of c):")
print(phi)
print("row-normalized correlation mix R:")
print(R)
print()

# --- 5. compose prototypes and generate classifier rows --------------------
protos = compose_prototypes(vectors, R)
gen = WeightGenerator(K, cfg.seed)
rows = gen.forward(ad.Tensor(np.stack([p.g for p in protos])))
print("per class: ||own vector||, ||mixed prototype||, ||generated row||")
for p, row in zip(protos, rows.data):
    print(f"  class {p.class_id}:  {np.linalg.norm(p.v):6.3f}  "
          f"{np.linalg.norm(p.g):6.3f}  {np.linalg.norm(row):6.3f}")
print()
print("the generated rows act as a 1x1-conv auxiliary classifier that is")
print("averaged into the global branch's head, tying its decisions to the")
print("federation-wide class geometry.")
