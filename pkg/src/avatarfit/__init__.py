"""avatarfit: cross-domain regression of bounded avatar parameters from images."""

__version__ = "0.1.0"
