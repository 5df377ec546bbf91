"""safectl: joint learning of neural barrier certificates and safe
controllers for black-box vehicle dynamics, with simulation environments,
training, evaluation, and ablation drivers."""

__version__ = "0.1.0"
