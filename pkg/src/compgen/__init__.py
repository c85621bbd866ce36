"""Slot-structured autoencoders on a synthetic multi-object scene.

Modules: ``autodiff`` (reverse-mode engine + Adam), ``scene`` (generator and
datasets), ``assignment`` (Hungarian matching), ``model`` (encoder, decoders,
checkpoints), ``objectives`` (reconstruction + consistency training),
``metrics`` (contrast, identifiability, isolated decoder error, heatmaps),
``config`` and ``cli``.
"""

__version__ = "0.1.0"
