"""aapt: desk-scale autoregressive adversarial post-training.

A causal video transformer that generates one latent frame per forward pass,
streamed through a sliding-window KV cache, trained in three stages
(flow-matching adaptation, consistency distillation, adversarial post-training)
on a procedurally generated camera-controllable world.
"""

__version__ = "0.1.0"
