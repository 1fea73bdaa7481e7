"""Kernel activation functions inside Siamese and matching networks.

A small, deterministic metric-learning stack: dense float64 tensors,
manually differentiated layers (convolution, pooling, linear, ReLU, and
the 1-D/2-D kernel activations), contrastive and episodic training, and
silhouette / N-way one-shot evaluation. Hot kernels run through a
compiled extension when it is built, with a numpy fallback selected at
import (see kaf_oneshot.backend_name()).
"""

from ._kernels import BACKEND as _BACKEND
from .data import (
    Dataset,
    Episode,
    PairBatch,
    load_idx,
    load_omniglot_dir,
    load_pgm_dir,
    make_synthetic,
    sample_episode,
    sample_pairs,
    subsample,
)
from .errors import (
    FormatError,
    KafOneshotError,
    MetricError,
    NumericError,
    ParameterError,
    SamplingError,
    ShapeError,
    StateError,
    TrainingError,
)
from .kaf import KafParams, init_alpha, kaf2d_backward, kaf2d_forward, kaf_backward, kaf_forward, make_dictionary, psd_check
from .losses import (
    EmbeddingSet,
    contrastive_loss,
    contrastive_loss_batch,
    embedding_distance,
    silhouette_score,
    similarity_report,
)
from .models import (
    MatchingModel,
    NetworkSpec,
    SiameseModel,
    build_att_siamese,
    build_matching_embedder,
    build_mnist_siamese,
    load_checkpoint,
    matching_episode_loss,
    matching_forward,
    save_checkpoint,
    siamese_forward,
)
from .tensor import Tensor, finite_difference_grad
from .training import (
    RunRecord,
    TrainConfig,
    adam_step,
    eval_oneshot,
    eval_silhouette,
    train_matching,
    train_siamese,
)

__version__ = "0.1.0"


def backend_name() -> str:
    """Which kernel backend this process is using: "fast" or "ref"."""
    return _BACKEND
