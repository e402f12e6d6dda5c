"""Few-shot, label-free domain adaptation for contrastive representation learning."""

__version__ = "0.1.0"
