"""Vision-language anomaly localization for cluttered scrap scenes.

A small, self-contained stack: float64 autodiff tensors, a toy multi-stage
vision transformer compared against learnable class text embeddings, a
multi-scale pooled-attention head, class-balanced focal + dice training, a
deterministic synthetic scene generator, and pixel-level AUROC/AP/AUPRO/F1
evaluation.
"""

__version__ = "0.1.0"
