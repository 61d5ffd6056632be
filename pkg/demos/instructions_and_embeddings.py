"""
Instruction templates and text embeddings
=========================================
"""

import numpy as np

from exprflow import ExpressionVocabulary, HashingEmbedder, instruction_corpus, render_instruction

vocab = ExpressionVocabulary.ck()
print(vocab)

for template in range(1, 6):
    print(render_instruction(template, "disgust", "happiness").text)

# the hashing encoder stands in for a frozen text encoder
embedder = HashingEmbedder(n_rows=16, dim=64, seed=0)
corpus = instruction_corpus(vocab)
mats = np.stack([embedder.embed(i.text) for i in corpus])
print(len(corpus), "instructions ->", mats.shape)

# word order survives mean pooling
a = embedder.embed("Turn this face from fear to anger.").mean(0)
b = embedder.embed("Turn this face from anger to fear.").mean(0)
print("pooled distance between reversed instructions: %.3f" % np.linalg.norm(a - b))
