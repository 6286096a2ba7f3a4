"""meshgrow: edge-convolutional growth prediction on surface meshes."""

__version__ = "0.1.0"
