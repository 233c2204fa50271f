"""Semantic image editing with disentangled background and object synthesis.

The scene is split into a background canvas and instance-level objects,
each synthesized by a dedicated network, recomposed, and harmonized by a
residual fusion network. See the README for the CLI and HTTP service.
"""

__version__ = "0.1.0"
