"""Multi-task adversarial imitation of sequence policies with a shared lifelong basis."""
__version__ = "0.1.0"
