"""Distribution-guided recoloring attack toolkit.

Images are numpy arrays throughout: RGB images are float64 (H, W, 3) in
[0, 1], Lab images are float64 (H, W, 3), segmentation masks are integer
(H, W) class-id maps.
"""

__version__ = "0.1.0"
