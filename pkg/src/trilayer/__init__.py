"""Occlusion-aware three-layer volumetric rendering and training.

The scene is split along each camera ray into an occlusion region (camera
to an inner sphere), a human region (inside an outer sphere, modelled as a
signed distance field in a canonical body frame), and a background
(everything beyond the outer sphere). Each layer is integrated separately
and composed front to back, which lets a photometric loss on occluded
monocular frames recover the full body behind unknown obstacles.
"""

__version__ = "0.1.0"
