"""Prototype-based self-supervised pretraining with training-free label assignment.

Modules: ``numcore`` (numerics, seeded RNG, tensor files), ``autodiff`` (reverse
mode gradients), ``datagen`` (synthetic multichannel motif data), ``protomodel``
(encoder, prototypes, head), ``ssl`` (contrastive pretraining), ``assign``
(Q scoring and slot assignment), ``adapt`` (fine-tuning, projection, probes),
``evaluation`` (metrics and experimental conditions) and ``cli``.
"""

__version__ = "0.1.0"
