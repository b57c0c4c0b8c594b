"""Data-starving CNNs with decoupled forward/backward activations, plus the
attack and evaluation harness used to measure their adversarial robustness."""

from .attacks import (AdversarialBatch, AttackConfig, LabelOracle, SurrogateConfig,
                      attack_success, black_box_fgsm, fgsm, input_gradient,
                      perturbation_norm, train_surrogate)
from .data import (Dataset, SyntheticSpec, batches, load_idx_split, load_mnist,
                   normalize, parse_idx_images, parse_idx_labels, pixel_stats,
                   synthetic)
from .layers import (BuildConfig, CompositeActivation, Network, PixelRange,
                     build_network, composite_activation, composite_backward,
                     entropy_bias_penalty, filter_activation_report, heaviside,
                     l1_activation_penalty, thermometer_encode)
from .risk import RiskInput, break_even_alpha, risk_delta
from .tensor import (Parameter, Rng, Tape, Tensor, conv2d, conv2d_1x1, construct,
                     grad_check, he_uniform_init, matmul, maxpool2x2, relu,
                     softmax_cross_entropy)
from .training import (Checkpoint, LossBreakdown, TrainConfig, TrainingDiverged,
                       composite_loss, evaluate_accuracy, load_checkpoint,
                       restore_network, save_checkpoint, train, train_step)

__version__ = "0.1.0"
