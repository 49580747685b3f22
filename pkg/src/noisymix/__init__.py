"""NoisyMix laboratory: noisy feature mixup, JSD stability training, robustness metrics
and numerical checks of the associated second-order expansions."""

__version__ = "0.1.0"
