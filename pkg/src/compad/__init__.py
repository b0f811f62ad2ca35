"""Complex activity detection toolkit.

Scene-graph attention over per-snippet agent tubes, a temporal-graph
localizer with binary-mask anchor proposals, end-to-end training on a
built-in reverse-mode autodiff engine, a synthetic data generator, and a
temporal-mAP evaluation suite.
"""

__version__ = "0.1.0"
