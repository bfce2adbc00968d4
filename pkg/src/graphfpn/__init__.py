"""graphfpn: superpixel-hierarchy graph feature pyramid with CNN fusion.

Builds an image-specific superpixel hierarchy, lifts backbone features onto a
multi-scale graph, runs attention-based contextual/hierarchical layers, and
fuses the result back into a conventional feature pyramid. Everything runs on
CPU in float64 on top of a small taped autodiff core.
"""

__version__ = "0.1.0"
