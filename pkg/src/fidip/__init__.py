"""Domain-adapted keypoint estimation under synthetic-to-real shift (FiDIP)."""
__version__ = "0.1.0"
