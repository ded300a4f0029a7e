"""Knowledge-augmented contrastive learning with radiomic positives, at desk scale."""

__version__ = "0.1.0"
