"""Self-similarity image denoising.

Decomposes noisy 8x8 patches into 30 wavelet/color coefficient groups,
predicts per-group matching scores between patch pairs with a small trainable
network, averages matched coefficients into an initial estimate, and refines
it with a residual dilated-convolution network.
"""

from . import aggregate, imgio, matcher, nncore, refine, transform
from .aggregate import AggregationInput, DenoisedPatch, aggregate as aggregate_patch, denoise_stage1
from .imgio import NoiseModel, PatchRef, SearchWindow, add_noise, read_image, write_image
from .matcher import Matcher, MatcherArch
from .refine import RefineArch, Refiner, refine_forward
from .transform import SubbandCoeffs, TransformSpec, analyze, synthesize

__version__ = "0.1.0"
