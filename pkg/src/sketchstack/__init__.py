"""sketchstack: ground 2D front-view block sketches into stable 3D block structures."""

__version__ = "0.1.0"
