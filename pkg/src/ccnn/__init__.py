"""Light cascaded CNN for player detection, written against numpy.

Submodules: ``tensor_ops`` (kernels), ``model`` (cascade network and model
file), ``loss``, ``train``, ``dense`` (whole-image inference), ``synth``
(synthetic scenes), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
