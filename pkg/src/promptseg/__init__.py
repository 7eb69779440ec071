"""Weakly supervised part segmentation with a distilled query-based prompter.

A frozen promptable segmentation backend supplies image features and mask
decoding; a frozen teacher turns box/point weak labels into prompt
embeddings; a trainable student predicts (category, embedding) pairs that
are Hungarian-matched to the teacher targets during training and decoded
into a semantic part map at inference.
"""

from .backend import MockBackend, load_backend, validate_backend
from .baseline import Detector, det_sam_predict, make_oracle_detector, oracle_detector
from .config import (Config, config_from_text, config_hash, config_to_text,
                     desk_config, load_config, save_config, validate_config,
                     with_overrides)
from .data import (DatasetRecord, GuardedMask, PartDataset, derive_weak_labels,
                   generate_synthetic, gt_access, load_coco_parts, load_dataset,
                   save_dataset, split_dataset)
from .errors import *  # noqa: F401,F403 - error classes are part of the API
from .evaluation import (ConfusionAccumulator, accumulate, compute_macc,
                         compute_miou, evaluate_dataset)
from .inference import merge_semantic, oracle_predict, predict_image, select_foreground
from .matching import (hungarian_assign, loss_with_assignment, match_sets,
                       pairwise_cost, total_loss)
from .prompter import StudentPrompter, init_prompter
from .teacher import TeacherPrompter
from .trainer import TrainState, fit, load_checkpoint, save_checkpoint, train_step
from .types import (Assignment, FeatureMap, ImageTensor, LabelKind, LossBreakdown,
                    MaskLogits, SemanticSegmentation, StudentOutput, TargetSet,
                    TeacherEmbedding, WeakLabel, box_label, point_label)

__version__ = "0.1.0"
