import os as _os
import json

_basepath = _os.path.dirname(__file__)
_filepath = _os.path.abspath(_os.path.join(_basepath, 'package-info.json'))
with open(_filepath) as f:
    package = json.load(f)

package_name = package['name'].replace(' ', '_').replace('-', '_')
__version__ = package['version']

from .errors import (SegmentationError, InvalidInputError, ConfigurationError, FormatError,  # noqa: E402
                     StateError, DivergenceError)
from .config import RunConfig, load_config, parse_config  # noqa: E402
from .codebook import Codebook, quantize, lookup, quantization_loss, straight_through  # noqa: E402
from .autoencoder import MaskAutoencoder, ScaleSchedule, TokenPyramid, interpolate  # noqa: E402
from .image_adapter import ImageEncoder, SvdAdapter, svd_branch  # noqa: E402
from .segmentor import NextScaleSegmentor, sample_next_scale, sequence_nll  # noqa: E402
from .consensus import SampleSet, aggregate, binarize, sample_masks, segment  # noqa: E402
from .ablation import build_variant, load_models  # noqa: E402

__all__ = [
    "SegmentationError", "InvalidInputError", "ConfigurationError", "FormatError", "StateError", "DivergenceError",
    "RunConfig", "load_config", "parse_config",
    "Codebook", "quantize", "lookup", "quantization_loss", "straight_through",
    "MaskAutoencoder", "ScaleSchedule", "TokenPyramid", "interpolate",
    "ImageEncoder", "SvdAdapter", "svd_branch",
    "NextScaleSegmentor", "sample_next_scale", "sequence_nll",
    "SampleSet", "aggregate", "binarize", "sample_masks", "segment",
    "build_variant", "load_models",
]
