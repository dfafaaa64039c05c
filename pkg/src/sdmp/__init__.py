"""Self-supervised pretraining with intra-batch data mixing, on a small numpy autodiff core."""

__version__ = "0.1.0"
