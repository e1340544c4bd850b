"""Cross-clinic lesion segmentation: consistency training under augmentation,
with optional adversarial feature pre-alignment, plus a synthetic multi-clinic
benchmark and evaluation harness."""

__version__ = "0.1.0"
