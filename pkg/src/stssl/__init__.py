"""Spatiotemporal teacher/student semi-supervised learning.

A metadata-consuming teacher ViT (metatoken built from latitude, longitude and
day of year) produces pseudo-labels and distillation targets for a
metadata-free student ViT with a distillation token.
"""

__version__ = "0.1.0"
