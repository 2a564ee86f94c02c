"""Deep convolutional Gaussian mixture models.

Layered density estimation over images: convolutional GMM layers
interleaved with folding (patch-gather) and max-pooling transforms, each
mixture layer trained by SGD on its own max-component log-likelihood.
The forward pass scores samples (density estimation, outlier detection);
the backwards pass generates images through a chain of hierarchical
priors, with gradient sharpening through non-invertible layers and
in-painting via data-derived top-level control.
"""

from .tensor import (CheckpointError, ConfigError, DataError, DcgmmError,
                     NumericalError, Shape3, as_tensor4, channel_vector,
                     log_sum_exp)
from .mixture import (CGMMParams, CGMMGradients, component_log_density,
                      full_log_likelihood, init_cgmm_params, loss_gradients,
                      max_component_log_likelihood, responsibilities,
                      sample_component)
from .layers import (ClassifierParams, ClassifierSpec, FoldSpec, GmmSpec,
                     LayerSpec, PoolSpec, classifier_backward,
                     classifier_forward, cgmm_backward, cgmm_forward,
                     cgmm_input_gradient, folding_backward, folding_forward,
                     folding_source_index, output_shape, pooling_backward,
                     pooling_forward)
from .model import (CANONICAL_CONFIGS, DcgmmModel, ForwardTrace, ModelConfig,
                    backward, build_model, canonical_model_report,
                    count_parameters, forward, load, parse_config, save)
from .training import TrainLog, TrainSchedule, evaluate_losses, train
from .sampling import (InpaintMask, SamplerConfig, SharpenConfig, inpaint,
                       sample, sharpen, top_s_filter)
from .evaluation import (AlphabetSheet, RocCurve, em_oracle, export_alphabet,
                         outlier_roc)
from .data import Dataset, filter_classes, load_idx, save_raw, write_png_grid

__version__ = "0.1.0"
