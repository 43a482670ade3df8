"""bitflip: training and bit-packed inference for binarized neural networks."""

from .nn import (APPROX_SIGN, CLIPPED_STE, IDENTITY_STE, BatchNorm,
                 BinaryActivation, BinaryConv2D, BinaryDense, LayerGradients,
                 ModelSpec, RealDense, ShapeError, backward, batchnorm_refresh,
                 build_params, evaluate, forward, pseudo_gradient, sign_binarize)
from .latent import (LatentOptimizerConfig, LatentState, binary_weights,
                     latent_init, latent_step, per_weight_rescale_demo,
                     verify_scale_invariance)
from .bop import (BopConfig, BopState, Schedule, bop_init, ema_update,
                  flip_step, schedule_value)
from .telemetry import (flip_count_latent, jsonl_to_csv, latent_eval_experiment,
                        pi_metric)
from .data import (AugmentSpec, DatasetHandle, augment, load_cifar10, load_mnist,
                   synthetic_task)
from .packed import (Checkpoint, PackedBinaryTensor, bench, load_checkpoint,
                     pack, packed_forward, save_checkpoint, unpack, xnor_dot)
from .config import RunConfig, parse_config
from .train import run_sweep, run_training

__version__ = "0.1.0"
