"""SANet: a numpy inference engine for real-time semantic segmentation."""

from .kernels import ConvParams, BnParams, set_single_thread, single_thread
from .model import (ModelConfig, SANet, build, describe, forward, impulse_support, multi_scale_infer,
                    param_shapes, receptive_field)
from .weights import init_weights, read_stf, write_stf

__version__ = "0.1.0"
