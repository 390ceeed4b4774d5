"""Language-to-geometry pipeline at desk scale.

Objects are segmented from depth, tokenized as location + shape ids, moved
in token space by a predictor, and the resulting rigid motion is recovered
with ICP and applied to a simulated end effector.
"""

__version__ = "0.1.0"
