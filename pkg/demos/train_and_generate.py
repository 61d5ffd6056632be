"""
Train the instruction-conditioned CVAE and generate a transition
================================================================

The synthetic benchmark with fewer epochs and no vertex loss, so it finishes
in about half a minute on a laptop.
"""

import numpy as np

from exprflow import (HashingEmbedder, I2FETConfig, NearestCenterOracle, SyntheticGenConfig, TrainConfig,
                      build_model, embed_manifest, evaluate_generation, generate, generate_synthetic, split,
                      synth_model, train)

manifest = split(generate_synthetic(SyntheticGenConfig(samples_per_pair=50, seed=0)), seed=0)
print("dataset:", len(manifest), "samples;", manifest.histogram)

provider = HashingEmbedder(16, 64)
embeddings = embed_manifest(manifest, provider)
head = synth_model(32, 100, 50, 2, seed=0)

model = build_model(I2FETConfig(), seed=0)
model, log = train(model, manifest, head, TrainConfig(epochs=20, seed=0, use_vertex_loss=False), embeddings=embeddings)
print("val loss: %.4f -> %.4f (best epoch %d)" % (log.rows[0]["val_total"], log.rows[-1]["val_total"],
                                                  log.best_epoch))

test = manifest.subset("test")
report = evaluate_generation(model, test, embeddings=embeddings[manifest.indices("test")])
print("Acc1 %.3f  Acc2 %.3f  G-mean %.3f  (ground truth %.3f)"
      % (report.acc1, report.acc2, report.gmean, report.ground_truth.acc1))

# one instruction, two anchors
text = "Transform this face from fear to surprise."
anchors = generate(model, provider.embed(text), rng_seed=3)
oracle = NearestCenterOracle.from_manifest(manifest)
feats = np.c_[anchors.expression, anchors.pose[:, 3:6]]
print(text, "->", [manifest.vocab.labels[i] for i in oracle.predict(feats)])
