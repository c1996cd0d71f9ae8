"""Provable slot recovery toolkit.

Synthetic slot-structured generative processes, Jacobian-structure
analysis (index sets, mechanism ranks, compositional contrast),
contrast-penalized autoencoder training with exact second-order
gradients, and slot identifiability scoring.
"""

# autodiff.jacobian is not re-exported at the package top level: the name
# would shadow the slotprov.jacobian submodule
from .autodiff import (DiffGraph, DiffNode, GraphMismatchError,
                       JacobianMatrix, backward, finite_difference_jacobian,
                       record)
from .generator import (GeneratorSpec, LatentBatch, LatentDistribution,
                        ObservationBatch, build_generator, correlated_latents,
                        export_generator_text, find_valid_generator,
                        independent_latents, load_generator, render,
                        sample_latents, sample_wishart_covariance,
                        save_generator, validate_generator)
from .jacobian import (ContrastValue, IndexSets, RankReport,
                       check_independence, check_irreducibility,
                       compositional_contrast, contrast_from_jacobian,
                       contrast_gradient_normalized, contrast_node,
                       contrast_slot_normalized, numerical_rank,
                       pixel_index_sets, slot_jacobian_blocks)
from .metrics import (Assignment, EvalSplit, ReadoutConfig, ReadoutModel,
                      SisReport, fit_readout, hungarian,
                      median_heuristic_bandwidth, r2_score, sis, slot_mcc)
from .nnet import Mlp, init_mlp
from .training import (AutoEncoderSpec, MetricRow, ObjectiveValue,
                       TrainConfig, TrainResult, TrainState, adam_step,
                       build_autoencoder, evaluate_model, load_checkpoint,
                       lr_schedule, objective, objective_grad,
                       objective_graph, save_checkpoint, train)

__version__ = "0.1.0"
