"""Quantized neural-network equalizers for coherent optical fiber links.

Subpackages are plain modules: ``tensor`` (autodiff), ``quantizers``,
``models``, ``quant_training``, ``channel``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
