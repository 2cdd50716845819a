"""Marine radar target detection with a preference-aware, LoRA-adapted transformer."""

__version__ = "0.1.0"
