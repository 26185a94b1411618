"""Synthetic embedding-space pairs with a planted ground-truth map.

Two source structures are available. ``isotropic`` draws unit-normalized
Gaussian rows; any rotation of such a cloud has the same distribution, so
only supervised or retrieval experiments can use it. ``skewed`` gives a few
leading directions distinct scales and skewed marginals on top of a flat
Gaussian tail, which makes the planted rotation identifiable from the two
distributions alone and is what the adversarial experiments use.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embed_io import Dictionary, EmbeddingSpace, unit_rows
from .linmap import MappingMatrix

STRUCTURES = ("isotropic", "skewed")
ROTATIONS = ("planted", "identity")


@dataclass(frozen=True)
class SynthConfig:
    n_words: int = 2000
    dim: int = 50
    rng_seed: int = 0
    noise_sigma: float = 0.0
    rotation: str = "planted"
    hub_count: int = 0
    zipf_exponent: float = 1.0
    structure: str = "isotropic"
    # skewed structure only
    salient_ratio: float = 0.7
    salient_skew: tuple[float, ...] = (1.0, -1.0, 0.6, -0.6, 0.3, -0.3)
    tail_scale: float = 0.15
    src_lang: str = "src"
    tgt_lang: str = "tgt"

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_words < self.dim:
            raise ValueError("n_words must be at least dim")
        if self.rotation not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}")
        if not 0 <= self.hub_count < self.n_words:
            raise ValueError("hub_count must be in [0, n_words)")
        if len(self.salient_skew) > self.dim:
            raise ValueError("more salient directions than dimensions")


@dataclass(frozen=True)
class SynthPair:
    src: EmbeddingSpace
    tgt: EmbeddingSpace
    gold: Dictionary
    planted_w: MappingMatrix
    frequencies: np.ndarray = field(repr=False)
    hubs: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, dtype=np.int64))


def random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal factor of a Gaussian matrix, with the triangular factor's
    diagonal forced positive so the result is unique for a given draw."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def zipf_counts(n: int, exponent: float, total: float = 1e7) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    weights = ranks ** -exponent
    return np.maximum(1, np.floor(total * weights / weights.sum())).astype(np.int64)


def _source_rows(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((cfg.n_words, cfg.dim))
    if cfg.structure == "isotropic":
        return unit_rows(z)
    m = len(cfg.salient_skew)
    skew = np.zeros(cfg.dim)
    skew[:m] = cfg.salient_skew
    scales = np.full(cfg.dim, cfg.tail_scale)
    scales[:m] = cfg.salient_ratio ** np.arange(m)
    # z + a (z^2 - 1): zero mean, skewness grows with |a|, sign follows a
    x = (z + skew * (z ** 2 - 1.0)) * scales
    basis = random_orthogonal(cfg.dim, rng)
    return unit_rows(x @ basis.T)


def generate_pair(cfg: SynthConfig) -> SynthPair:
    """Source space, noisy rotated copy, identity gold pairs and the rotation."""
    rng = np.random.default_rng(cfg.rng_seed)
    x = _source_rows(cfg, rng)
    r = random_orthogonal(cfg.dim, rng) if cfg.rotation == "planted" else np.eye(cfg.dim)
    y = x @ r.T if cfg.rotation == "planted" else x.copy()
    if cfg.noise_sigma > 0:
        y = unit_rows(y + cfg.noise_sigma * rng.standard_normal(y.shape))
    elif cfg.rotation == "planted":
        y = unit_rows(y)
    words = tuple(f"word_{i}" for i in range(cfg.n_words))
    src = EmbeddingSpace(words, x, cfg.src_lang)
    tgt = EmbeddingSpace(words, y, cfg.tgt_lang)
    hubs = np.zeros(0, dtype=np.int64)
    if cfg.hub_count:
        tgt, hubs = plant_hubs(tgt, cfg.hub_count, rng, return_indices=True)
    ids = np.arange(cfg.n_words)
    gold = Dictionary(np.stack([ids, ids], axis=1), cfg.src_lang, cfg.tgt_lang)
    return SynthPair(src, tgt, gold, MappingMatrix(r), zipf_counts(cfg.n_words, cfg.zipf_exponent),
                     hubs)


def plant_hubs(space: EmbeddingSpace, hub_count: int, rng=0, reference=None,
               spread: float = 0.05, return_indices: bool = False):
    """Replace ``hub_count`` random rows with noisy copies of the centroid
    direction of ``reference`` (default: the space itself), re-normalized."""
    if not 0 <= hub_count < len(space):
        raise ValueError("hub_count must be in [0, n)")
    rng = np.random.default_rng(rng)
    if hub_count == 0:
        return (space, np.zeros(0, dtype=np.int64)) if return_indices else space
    ref = unit_rows(space.vectors if reference is None else reference)
    centroid = ref.mean(axis=0)
    centroid /= np.linalg.norm(centroid)
    rows = np.sort(rng.choice(len(space), size=hub_count, replace=False))
    vecs = np.array(space.vectors, dtype=np.float64)
    noise = rng.standard_normal((hub_count, space.dim)) * spread / np.sqrt(space.dim)
    vecs[rows] = unit_rows(centroid + noise)
    out = EmbeddingSpace(space.words, vecs.astype(space.vectors.dtype), space.lang)
    return (out, rows) if return_indices else out
