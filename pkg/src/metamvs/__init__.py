"""Meta-learned self-supervised multi-view stereo on synthetic scenes."""

__version__ = "0.1.0"
