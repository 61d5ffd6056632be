"""Instruction-driven 3D facial expression transition at desk scale."""

from .dataset import (AnchorPair, DatasetManifest, Sample, SyntheticGenConfig, class_histogram,
                      generate_synthetic, load_params_dataset, split, synth_neutral_set)
from .errors import (ConfigurationError, DomainError, ExprFlowError, NotFoundError, ParseError, ShapeError,
                     StateError, TrainingDivergedError, ValidationError)
from .eval_harness import (CBFocalConfig, ClassifierConfig, ClassifierModel, MetricsReport, NearestCenterOracle,
                           acc_metrics, cb_focal_loss, confusion_matrix, effective_number_weights,
                           evaluate_generation, gmean, per_class_recall, train_classifier)
from .head_model import (FaceParams, HeadModel, compute_vertices, export_obj, parse_obj, reconstruct_head,
                         synth_model)
from .i2fet import (I2FETConfig, I2FETModel, TrainConfig, build_model, embed_manifest, generate, kl_term,
                    loss_total, reparameterize, train)
from .ifed import IFED, ConditionalVectors, IFEDConfig, ifed_forward
from .ned import NEDConfig, NEDModel, generate_neutral, train_ned
from .text_embed import (ExpressionVocabulary, HashingEmbedder, Instruction, LookupEmbedder, embed,
                         instruction_corpus, render_instruction)
from .trajectory import (ExpressionFrame, Trajectory, build_trajectory, export_obj_sequence, insert_neutral,
                         interpolate, meshes_for)

__version__ = "0.1.0"
