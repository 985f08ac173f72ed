"""binlite: a small numpy engine for training, quantizing and serving image classifiers."""

from .data import AugmentConfig, DatasetManifest, scan_directory, split
from .fileformat import load, save
from .model import ArchPreset, ModelGraph, build_preset, freeze, param_count, predict
from .quant import bench, dequantize_once, infer, quantize
from .train import TrainConfig, TrainReport, evaluate, fit

__version__ = "0.1.0"
