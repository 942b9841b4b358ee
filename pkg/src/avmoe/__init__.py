"""Desk-scale audio-visual mixture-of-experts and corruption-robust
self-distillation kit, built on a small numpy autodiff core."""

__version__ = "0.1.0"
