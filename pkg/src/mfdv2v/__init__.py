"""Motion-feature guided video-to-video diffusion (MFD-V2V) at desk scale."""

__version__ = "0.1.0"
