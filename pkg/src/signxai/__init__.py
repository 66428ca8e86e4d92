"""Sign-language image classification with frozen transfer-learning backbones,
metric evaluation and expected-gradients pixel attribution."""

__version__ = "0.1.0"
