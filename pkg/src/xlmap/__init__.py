"""Unsupervised alignment of monolingual word-embedding spaces.

Adversarial initialization, Procrustes refinement on induced dictionaries,
CSLS retrieval, and the evaluation tasks used to score bilingual maps.
"""
from .embed_io import (Dictionary, EmbeddingSpace, load_dictionary, load_embeddings,
                       normalize, save_dictionary, save_embeddings)
from .linmap import MappingMatrix, apply_map, least_squares_map, orthogonalize_step, procrustes
from .metric import csls_scores, isf_scores, knn, neighborhood_stats, translate
from .refine import RefineParams, build_dictionary, refine
from .modelsel import CriterionConfig, criterion_accuracy_correlation, validation_criterion
from .adversary import DiscriminatorParams, TrainConfig, train_adversarial
from .synthgen import SynthConfig, generate_pair, plant_hubs

__version__ = "0.1.0"
