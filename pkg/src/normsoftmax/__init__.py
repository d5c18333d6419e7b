"""Normalized-softmax deep metric learning on numpy.

Train embeddings with proxy-classification losses (normalized softmax, NCA,
LMCL, class-subsampled softmax) and evaluate them with Recall@K, k-means NMI
and binarized Hamming retrieval.
"""
from .errors import NonFiniteLoss, NormSoftmaxError
from .linalg import cosine_distance, layer_norm, l2_normalize
from .losses import (
    LossConfig,
    LossVariant,
    batch_loss,
    lmcl_loss,
    nca_loss,
    normalized_softmax_loss,
    subsampled_softmax_loss,
)
from .retrieval import (
    EmbeddingSet,
    binarize,
    evaluate,
    hamming_knn,
    kmeans,
    knn_cosine,
    nmi,
    recall_at_k,
)
from .sampling import BatchSpec, Dataset, generate_synthetic, make_rng
from .trainer import EmbeddingModel, TrainConfig, embed, fit, grad_check

__version__ = "0.1.0"
