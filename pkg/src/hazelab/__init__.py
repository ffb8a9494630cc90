"""Dehazing toolkit built around a per-pixel atmospheric light map."""
from .classical import DcpParams, dcp_dehaze, retrofit_dehaze
from .colorspace import ciede2000, psnr, rgb_to_lab, ssim
from .haze import HazeParams, dehaze_map, synthesize, synthesize_scene
from .losses import fwb_loss

__version__ = "0.1.0"
