"""Adversarial training with ascending attack radii (ACAT) and joint
base/augmented training through dual batch normalization (DAJAT), plus the
attack, analysis, and evaluation tooling around them.
"""

from .core_config import (BN_VARIANTS, METHODS, ConfigError, StepSchedule,
                          ThreatModel, TrainConfig, attack_steps_at, epsilon_at,
                          lr_at)
from .data_augment import (AugmentPolicy, DataFormatError, ImageBatch, PolicyError,
                           TaggedViewBatch, apply_op, apply_policy, base_augment,
                           default_policy, hflip, histogram_mse, load_cifar10_binary,
                           load_cifar10_dir, make_views, patch_mse, policy_augment,
                           synth_dataset, write_cifar10_binary)
from .losses import (LossBreakdown, LossShapeError, cross_entropy, dajat_loss, jsd,
                     kl_div, softmax_probs, trades_loss)
from .dualbn_model import (ArchiveError, DualBN2d, DualBNConvNet, ModelSpec,
                           RoutingError, as_label_tensor, as_model_input,
                           bn_cosine_similarity, build_model, inference_forward,
                           load_named_state, named_state, read_tensor_archive,
                           write_tensor_archive)
from .weight_space import (AveragedModel, PerturbationError, WeightPerturbation,
                           apply_perturbation, awp_perturb, ema_update,
                           project_perturbation, remove_perturbation)
from .attacks import (AttackError, AttackResult, AttackSpec, TransferResult,
                      classification_accuracy, fgsm_attack, kl_attack, pgd_attack,
                      sweep_rows, transfer_attack)
from .training import (TrainingAbort, TrainResult, TrainState, load_checkpoint,
                       make_optimizer, save_checkpoint, train_acat, train_dajat)
from .eval_harness import (CheckVerdict, EvalReport, SANITY_CHECKS, SurfaceGrid,
                           evaluate, loss_surface_grid, loss_vs_epsilon_curve,
                           masking_sanity_checks)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
