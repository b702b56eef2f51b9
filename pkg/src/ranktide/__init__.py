"""ranktide: segmented rank-pooled dynamic images, attention-based sequence
classification, and a leave-one-subject-out evaluation harness."""

__version__ = "0.1.0"
