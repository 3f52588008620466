"""Panel-based dense prediction on equirectangular panoramas.

Vertical panels cut from a 360 image are encoded independently, mixed by
window and panel attention blocks, decoded, and blended back into the
panorama with learned confidence. Everything runs on a small numpy
autodiff engine.
"""

from .errors import ConfigError, DataError, NumericError, ShapeError
from .model import ModelConfig, PanelNet
from .panels import PanelConfig, merge_panels, partition_erp

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "ModelConfig", "NumericError", "PanelConfig", "PanelNet",
    "ShapeError", "merge_panels", "partition_erp",
]
