"""Knowledge distillation with a dual-momentum (distillation-oriented) trainer."""

__version__ = "0.1.0"
