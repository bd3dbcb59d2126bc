"""Self-supervised representation learning with context-selected positive pairs.

Positives for each anchor come from augmentation alone, from the same
capture sequence, from a softmax over spatiotemporal context distance, or
from (optionally noisy) class labels.  Networks, losses and gradients are
implemented on a small reverse-mode autodiff engine over numpy arrays.
"""

from .context import ContextConfig, ContextSampler, encode_context, encode_contexts, positive_distribution
from .data import Dataset, read_csv, write_csv
from .errors import (BatchSizeError, ConfigError, ContractError, CtxPairsError, DimensionError,
                     EmptyInputError, IngestionError, NumericDomainError, RangeError,
                     SupervisionError, VersionError)
from .evaluation import (EvalReport, ProbeConfig, evaluate, knn_retrieval, linear_probe,
                         retrieval_purity)
from .experiment import ExperimentConfig, ResultsMatrix, run_matrix
from .losses import LossConfig, simclr_loss, simsiam_loss, triplet_loss
from .model import (ModelParams, NetworkSpec, TrainConfig, embed, extract_features, load_checkpoint,
                    save_checkpoint, train)
from .pairing import PairPlan, Strategy, build_epoch_plan, select_negatives, select_positive
from .synthcam import WorldConfig, generate_world, label_subset, make_benchmark, split_train_test

__version__ = "0.1.0"
