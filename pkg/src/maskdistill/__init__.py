"""Teacher-student self-distillation pretraining with masked reconstruction,
queue-based contrastive learning, and local prototype alignment."""

from maskdistill.config import RunConfig, load_config, config_digest

__all__ = ["RunConfig", "load_config", "config_digest"]

__version__ = "0.1.0"
