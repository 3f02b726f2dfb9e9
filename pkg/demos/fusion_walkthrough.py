"""
Category fusion by hand
=======================

Two tiny maps, pushed through ``fuse`` and ``combine``, to see what the
category path can and cannot tell apart.
"""
import numpy as np

from refseg.segmentation import FusionWeight, combine, fuse

# a 1x3 grid over classes (background, ball, box)
pmap = np.array([[[0.90, 0.05, 0.05],    # background cell
                  [0.05, 0.90, 0.05],    # a ball
                  [0.05, 0.90, 0.05]]])  # another ball, same distribution

ptext = np.array([0.02, 0.95, 0.03])     # "ball"
print("p2 for 'ball':", fuse(pmap, ptext).round(4))

# both balls light up equally: the category path has no notion of "left"
p2 = fuse(pmap, ptext)
assert p2[0, 1] == p2[0, 2]

# the baseline path can use coordinates; pretend it learned "left ball"
p1 = np.array([[0.05, 0.85, 0.10]])
for raw in (-2.0, 0.0, 2.0):
    w = FusionWeight(raw)
    print(f"alpha={w.alpha:.3f}", combine(p1, p2, w).round(3))

# forced ends give back either path exactly
assert np.array_equal(combine(p1, p2, FusionWeight(0.0, forced=1.0)), p1)
assert np.array_equal(combine(p1, p2, FusionWeight(0.0, forced=0.0)), p2)

# the two-class example: both sides 0.99 sure of the same class
print(fuse(np.array([[[0.99, 0.01]]]), np.array([0.99, 0.01])))
