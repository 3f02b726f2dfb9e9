"""
A look at the shape-world benchmark
===================================

Builds a small benchmark and prints what the model is asked to do.
Pass a directory to also dump the first few images and masks as PPM/PGM.
"""
import sys
from collections import Counter

import numpy as np

from refseg.data import build_benchmark, write_dataset
from refseg.embeddings import nearest_neighbors

bench = build_benchmark(0, n_train=60, n_test=20, n_vision=20)
print("classes:", ", ".join(bench.catalog.names))

for s in bench.train[:8]:
    print(f"{s.image_id}: {s.expression!r} covers {int(s.gt_mask.sum())} px")

kinds = Counter("qualified" if " " in s.expression else "plain" for s in bench.train)
print("train expressions:", dict(kinds))
print("test expressions using a synonym:",
      sum(s.expression.split()[-1] not in bench.catalog.names for s in bench.test), "of", len(bench.test))

# the stand-in word vectors keep synonyms close to their class name
for word in ("ball", "crate"):
    print(word, "->", [(t, round(v, 3)) for t, v in nearest_neighbors(bench.vectors, word, 3)])

# class-name samples come from fully annotated scenes, one per object
print("class-name samples:", len(bench.synthesized), "from", len(bench.vision), "scenes")
labels = bench.vision[0].label_map()
ks, ns = np.unique(labels, return_counts=True)
print("first vision scene label counts:", {int(k): int(n) for k, n in zip(ks, ns)})

if len(sys.argv) > 1:
    path = write_dataset(sys.argv[1], bench.train[:5])
    print("wrote", path)
