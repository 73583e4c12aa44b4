"""scanseg: bidirectional selective-scan segmentation at desk scale.

A self-contained numpy implementation of a hierarchical segmentation model
whose global stage is a linear-time bidirectional state-space scan, together
with the reverse-mode tape needed to train it, boundary-aware metrics, a
deterministic synthetic dataset, and a complexity benchmark harness.
"""

__version__ = "0.1.0"
