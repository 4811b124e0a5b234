"""ribbonracer: learned g-g-v envelopes and minimum-lap-time planning on 3D ribbon roads."""

__version__ = "0.1.0"
