"""Stochastic-noise classifier toolkit.

Trains convolutional classifiers under injected first-layer Gaussian noise
by propagating (mean, variance) analytically through the layers, optimizing
a closed-form stochastic loss with hand-derived gradients, and deploying
the deterministic expectation model.  Includes FGSM/PGD evaluation, a
noise-aware single-step attack against randomized inference, and dataset /
experiment plumbing.
"""

__version__ = "0.1.0"

from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .mathops import (SeededRng, conv2d, erf, relative_error, sample_gaussian,
                      std_normal_cdf, std_normal_pdf)
from .moments import (GaussianTensor, SelectionMap, VAR_FLOOR, VarianceMode,
                      exact_rectified_moments, inject_noise,
                      mc_forward_moments, propagate_affine, propagate_meanpool,
                      propagate_relu)
from .network import (Conv, Flatten, ForwardCache, FullyConnected, LayerSpec,
                      MeanPool, ModelConfig, ParameterSet, ReLU,
                      conv_as_matrix, forward_expectation,
                      forward_expectation_batch, forward_stochastic,
                      forward_stochastic_batch, init_params, load_checkpoint,
                      preset_configs, save_checkpoint)
from .loss import (Bimodel, LossBreakdown, LossPolicy, Plain,
                   loss_grad_output, pairwise_win_probability,
                   stochastic_loss)
from .backprop import (FdReport, Gradients, backprop, central_difference,
                       finite_difference_check)
from .train import (History, SigmaPolicy, TrainSchedule, evaluate, sgd_update,
                    train, train_adversarial_baseline)
from .attacks import (AttackConfig, EvalCurve, Expectation, Randomized,
                      adaptive_attack, fgsm, pgd, randomized_predict,
                      robustness_curve)
from .data import (Dataset, batches, load_cifar10, load_mnist, subset,
                   synthetic_digits)
