"""omnifield: multi-view 2D masks -> consistent 3D feature field -> interactive segmentation."""

__version__ = "0.1.0"
