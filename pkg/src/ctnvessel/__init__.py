"""Coronary artery and aorta segmentation with a 3D U-Net / Swin Transformer hybrid.

Submodules:

- ``volio``: volume file format, manifests, resizing and synthetic phantoms
- ``unet3d``, ``swin3d``, ``fusion``: the two encoders and the fused network
- ``metrics``: Dice, ASSD and skeleton recall/precision
- ``train``, ``inference``, ``checkpoint``: training loop, prediction, on-disk state
- ``cli``: the ``ctnvessel`` command

The torch-based modules are not imported here so that ``volio`` and
``metrics`` stay usable without loading torch.
"""

__version__ = "0.1.0"
