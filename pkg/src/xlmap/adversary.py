"""Domain-adversarial training of a linear map.

A small leaky-ReLU MLP learns to tell mapped source vectors from target
vectors while the map is trained to fool it. Gradients are derived by hand;
everything runs on numpy.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .embed_io import EmbeddingSpace
from .linmap import MappingMatrix, orthogonalize_array
from .modelsel import CriterionConfig, validation_criterion

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12
HISTORY_FIELDS = ("epoch", "criterion", "loss_d", "loss_w", "disc_accuracy", "lr")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.1
    # None: the map shares the discriminator's learning rate
    map_learning_rate: float | None = None
    lr_decay: float = 0.95
    lr_shrink: float = 2.0
    shrink_on_criterion_drop: bool = True
    epochs: int = 5
    iterations_per_epoch: int = 100_000 // 32
    discriminator_feed_limit: int = 50_000
    dis_steps: int = 1
    hidden_size: int = 2048
    n_hidden_layers: int = 2
    leaky_slope: float = 0.2
    dropout_rate: float = 0.1
    smoothing: float = 0.2
    smooth_mapping_loss: bool = True
    beta: float = 0.01
    rng_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("batch_size", "iterations_per_epoch", "discriminator_feed_limit",
                     "dis_steps", "hidden_size", "n_hidden_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("learning_rate", "lr_decay"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.map_learning_rate is not None and self.map_learning_rate <= 0:
            raise ValueError("map_learning_rate must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not 0 <= self.smoothing < 0.5:
            raise ValueError("smoothing must lie in [0, 0.5)")
        if self.lr_shrink < 1:
            raise ValueError("lr_shrink must be >= 1")


@dataclass
class DiscriminatorParams:
    """MLP ``d -> hidden -> ... -> 1`` with a sigmoid output.

    Weights are stored ``(fan_in, fan_out)`` so a batch of row vectors is
    propagated as ``h @ W + b``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    leaky_slope: float = 0.2
    dropout_rate: float = 0.1
    smoothing: float = 0.2

    @classmethod
    def init(cls, dim: int, hidden=(2048, 2048), rng=None, dtype=np.float64,
             leaky_slope=0.2, dropout_rate=0.1, smoothing=0.2) -> "DiscriminatorParams":
        """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for weights and biases."""
        rng = np.random.default_rng(rng)
        sizes = [dim, *hidden, 1]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            biases.append(rng.uniform(-bound, bound, fan_out).astype(dtype))
        return cls(weights, biases, leaky_slope, dropout_rate, smoothing)

    @classmethod
    def zeros_like(cls, other: "DiscriminatorParams") -> "DiscriminatorParams":
        return cls([np.zeros_like(w) for w in other.weights],
                   [np.zeros_like(b) for b in other.biases],
                   other.leaky_slope, other.dropout_rate, other.smoothing)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    def copy(self) -> "DiscriminatorParams":
        return copy.deepcopy(self)

    def tensors(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


def _dropout_mask(shape, rate, rng, dtype):
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate)


def _forward(params: DiscriminatorParams, z: np.ndarray, mask=None):
    a = z if mask is None else z * mask
    acts, pres = [a], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = a @ w + b
        if i < last:
            pres.append(h)
            a = np.where(h > 0, h, params.leaky_slope * h)
            acts.append(a)
    return h[:, 0], (acts, pres, mask)


def _backward(params: DiscriminatorParams, cache, dlogit: np.ndarray, param_grads: bool = True):
    """Backpropagate ``dL/dlogit``; returns (weight grads, bias grads, dL/dz)."""
    acts, pres, mask = cache
    g = dlogit[:, None].astype(acts[0].dtype, copy=False)
    n = len(params.weights)
    gw: list = [None] * n
    gb: list = [None] * n
    for i in range(n - 1, -1, -1):
        if param_grads:
            gw[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            g = g * np.where(pres[i - 1] > 0, 1.0, params.leaky_slope).astype(g.dtype)
    if mask is not None:
        g = g * mask
    return gw, gb, g


def discriminator_forward(params: DiscriminatorParams, z, train_mode: bool = False,
                          rng=None) -> np.ndarray:
    """``P(source = 1 | z)`` for a vector or a batch of row vectors.

    In train mode input components are zeroed with probability
    ``dropout_rate`` and survivors rescaled, so eval mode needs no scaling.
    """
    z = np.asarray(z, dtype=params.weights[0].dtype)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != params.dim:
        raise ValueError(f"input dimension {z.shape[1]} does not match discriminator {params.dim}")
    mask = None
    if train_mode and params.dropout_rate > 0:
        mask = _dropout_mask(z.shape, params.dropout_rate, np.random.default_rng(rng), z.dtype.type)
    logit, _ = _forward(params, z, mask)
    p = expit(logit)
    return p[0] if single else p


def adversarial_bce(p_src, q_tgt, smoothing: float = 0.0, flip: bool = False) -> float:
    """Two-sided cross-entropy on discriminator outputs.

    Mapped sources are labelled ``1 - s`` and targets ``s`` (swapped when
    ``flip``); each side is averaged separately and the two means added.
    Probabilities are clamped to ``[1e-12, 1 - 1e-12]``.
    """
    hi, lo = 1.0 - smoothing, smoothing
    if flip:
        hi, lo = lo, hi
    p = np.clip(np.asarray(p_src, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    q = np.clip(np.asarray(q_tgt, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    src_term = -np.mean(hi * np.log(p) + (1 - hi) * np.log1p(-p))
    tgt_term = -np.mean(lo * np.log(q) + (1 - lo) * np.log1p(-q))
    return float(src_term + tgt_term)


def _as_w(w) -> np.ndarray:
    return w.w if isinstance(w, MappingMatrix) else np.asarray(w)


def _mask_pair(params, shapes, dtype, train_mode, rng):
    if not (train_mode and params.dropout_rate > 0):
        return None, None
    rng = np.random.default_rng(rng)
    return tuple(_dropout_mask(s, params.dropout_rate, rng, dtype.type) for s in shapes)


def discriminator_loss_and_grads(params: DiscriminatorParams, w, batch_src, batch_tgt,
                                 train_mode: bool = False, rng=None):
    """Discriminator loss and its gradient w.r.t. every weight and bias.

    Returns ``(loss, grad_weights, grad_biases, accuracy)``; accuracy is the
    fraction of the batch classified on the correct side of 0.5.
    """
    dtype = params.weights[0].dtype
    w = _as_w(w).astype(dtype, copy=False)
    xs = np.atleast_2d(np.asarray(batch_src, dtype=dtype))
    yt = np.atleast_2d(np.asarray(batch_tgt, dtype=dtype))
    if len(xs) == 0 or len(yt) == 0:
        raise ValueError("empty batch")
    zs = xs @ w.T
    n, m = len(zs), len(yt)
    ms, mt = _mask_pair(params, (zs.shape, yt.shape), dtype, train_mode, rng)
    mask = None if ms is None else np.vstack([ms, mt])
    logit, cache = _forward(params, np.vstack([zs, yt]), mask)
    prob = expit(logit.astype(np.float64))
    s = params.smoothing
    loss = adversarial_bce(prob[:n], prob[n:], s)
    label = np.concatenate([np.full(n, 1.0 - s), np.full(m, s)])
    scale = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    gw, gb, _ = _backward(params, cache, (prob - label) * scale)
    acc = float((np.sum(prob[:n] > 0.5) + np.sum(prob[n:] < 0.5)) / (n + m))
    return loss, gw, gb, acc


def discriminator_loss(params, w, batch_src, batch_tgt, train_mode=False, rng=None) -> float:
    return discriminator_loss_and_grads(params, w, batch_src, batch_tgt, train_mode, rng)[0]


def mapping_loss_and_grad(params: DiscriminatorParams, w, batch_src, batch_tgt,
                          smoothing: float | None = None):
    """Label-flipped loss and its gradient w.r.t. the map only.

    The discriminator is evaluated without dropout. The target half of the
    loss does not depend on the map and contributes no gradient.
    """
    dtype = params.weights[0].dtype
    s = params.smoothing if smoothing is None else smoothing
    w = _as_w(w).astype(dtype, copy=False)
    xs = np.atleast_2d(np.asarray(batch_src, dtype=dtype))
    yt = np.atleast_2d(np.asarray(batch_tgt, dtype=dtype))
    if len(xs) == 0 or len(yt) == 0:
        raise ValueError("empty batch")
    logit_s, cache = _forward(params, xs @ w.T)
    logit_t, _ = _forward(params, yt)
    p = expit(logit_s.astype(np.float64))
    q = expit(logit_t.astype(np.float64))
    loss = adversarial_bce(p, q, s, flip=True)
    _, _, dz = _backward(params, cache, (p - s) / len(xs), param_grads=False)
    grad_w = dz.T.astype(np.float64) @ xs.astype(np.float64)
    return loss, grad_w


def mapping_loss(params, w, batch_src, batch_tgt, smoothing=None) -> float:
    return mapping_loss_and_grad(params, w, batch_src, batch_tgt, smoothing)[0]


def discriminator_accuracy(params: DiscriminatorParams, w, batch_src, batch_tgt) -> float:
    """Eval-mode accuracy on a (typically held-out) batch."""
    zs = np.asarray(batch_src) @ _as_w(w).T
    p = discriminator_forward(params, zs)
    q = discriminator_forward(params, batch_tgt)
    return float((np.sum(p > 0.5) + np.sum(q < 0.5)) / (len(p) + len(q)))


@dataclass
class TrainHistory:
    """Per-epoch records plus the final discriminator."""

    epochs: list[dict] = field(default_factory=list)
    discriminator: DiscriminatorParams | None = None
    best_epoch: int | None = None
    best_criterion: float = -math.inf

    def __len__(self):
        return len(self.epochs)

    def __iter__(self):
        return iter(self.epochs)

    def __getitem__(self, i):
        return self.epochs[i]

    def column(self, name) -> list:
        return [e[name] for e in self.epochs]

    def to_csv(self, path) -> None:
        extra = []
        for e in self.epochs:
            extra += [k for k in e if k not in HISTORY_FIELDS and k not in extra]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow([*HISTORY_FIELDS, *extra])
            for e in self.epochs:
                out.writerow([_fmt(e.get(k, "")) for k in (*HISTORY_FIELDS, *extra)])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class _TrainState:
    w: np.ndarray
    disc: DiscriminatorParams
    lr: float
    map_lr: float
    epoch: int
    best_w: np.ndarray
    history: TrainHistory
    rng: np.random.Generator


def _new_state(dim: int, cfg: TrainConfig) -> _TrainState:
    seq = np.random.SeedSequence(cfg.rng_seed)
    init_seq, batch_seq = seq.spawn(2)
    dtype = np.dtype(cfg.dtype)
    disc = DiscriminatorParams.init(dim, (cfg.hidden_size,) * cfg.n_hidden_layers,
                                    np.random.default_rng(init_seq), dtype.type,
                                    cfg.leaky_slope, cfg.dropout_rate, cfg.smoothing)
    w = np.eye(dim)
    map_lr = cfg.learning_rate if cfg.map_learning_rate is None else cfg.map_learning_rate
    return _TrainState(w, disc, cfg.learning_rate, map_lr, 0, w.copy(), TrainHistory(),
                       np.random.default_rng(batch_seq))


def save_checkpoint(path, state: _TrainState, cfg: TrainConfig) -> None:
    """Everything needed to resume training bit-for-bit, in one ``.npz``."""
    arrays = {"w": state.w, "best_w": state.best_w}
    for i, (wt, b) in enumerate(zip(state.disc.weights, state.disc.biases)):
        arrays[f"disc_w{i}"] = wt
        arrays[f"disc_b{i}"] = b
    meta = {
        "epoch": state.epoch, "lr": state.lr, "map_lr": state.map_lr,
        "best_epoch": state.history.best_epoch,
        "best_criterion": state.history.best_criterion,
        "history": state.history.epochs,
        "rng": state.rng.bit_generator.state,
        "config": asdict(cfg),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> _TrainState:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        n_layers = sum(1 for k in data.files if k.startswith("disc_w"))
        cfg = meta["config"]
        disc = DiscriminatorParams([data[f"disc_w{i}"].copy() for i in range(n_layers)],
                                   [data[f"disc_b{i}"].copy() for i in range(n_layers)],
                                   cfg["leaky_slope"], cfg["dropout_rate"], cfg["smoothing"])
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        history = TrainHistory(meta["history"], disc, meta["best_epoch"], meta["best_criterion"])
        return _TrainState(data["w"].copy(), disc, meta["lr"], meta["map_lr"], meta["epoch"],
                           data["best_w"].copy(), history, rng)


def train_adversarial(src: EmbeddingSpace, tgt: EmbeddingSpace, cfg: TrainConfig = TrainConfig(),
                      criterion: CriterionConfig = CriterionConfig(),
                      monitor: Callable[[MappingMatrix], dict] | None = None,
                      checkpoint_path=None, resume=None) -> tuple[MappingMatrix, TrainHistory]:
    """Alternate discriminator and mapping SGD steps, starting from identity.

    Each iteration runs ``dis_steps`` discriminator updates, one mapping
    update and one orthogonalization step. After every epoch the learning
    rates decay, the validation criterion is evaluated, the rates shrink if
    it fell below the best value seen, and the best map is kept. ``monitor``
    may add extra per-epoch columns (e.g. supervised accuracy). Returns the
    best-criterion map, or the identity when no epoch ran.
    """
    if src.dim != tgt.dim:
        raise ValueError(f"dimension mismatch: source {src.dim}, target {tgt.dim}")
    dim = src.dim
    dtype = np.dtype(cfg.dtype)
    state = load_checkpoint(resume) if resume is not None else _new_state(dim, cfg)
    x = np.asarray(src.vectors[:cfg.discriminator_feed_limit], dtype=dtype)
    y = np.asarray(tgt.vectors[:cfg.discriminator_feed_limit], dtype=dtype)
    bs = cfg.batch_size
    s_map = cfg.smoothing if cfg.smooth_mapping_loss else 0.0
    rng = state.rng
    w = state.w
    disc = state.disc
    history = state.history

    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        sum_d = sum_w = sum_acc = 0.0
        n_d = 0
        worst_orth = 0.0
        eye = np.eye(dim)
        for it in range(cfg.iterations_per_epoch):
            for _ in range(cfg.dis_steps):
                xs = x[rng.integers(0, len(x), bs)]
                yt = y[rng.integers(0, len(y), bs)]
                loss_d, gw, gb, acc = discriminator_loss_and_grads(disc, w, xs, yt, True, rng)
                if not math.isfinite(loss_d):
                    raise TrainingDivergedError(
                        f"discriminator loss is {loss_d} at epoch {epoch}, iteration {it}")
                for p_, g_ in zip(disc.weights, gw):
                    p_ -= dtype.type(state.lr) * g_
                for p_, g_ in zip(disc.biases, gb):
                    p_ -= dtype.type(state.lr) * g_
                sum_d += loss_d
                sum_acc += acc
                n_d += 1
            xs = x[rng.integers(0, len(x), bs)]
            yt = y[rng.integers(0, len(y), bs)]
            loss_w, grad_w = mapping_loss_and_grad(disc, w, xs, yt, s_map)
            if not (math.isfinite(loss_w) and np.all(np.isfinite(grad_w))):
                raise TrainingDivergedError(
                    f"mapping loss is {loss_w} at epoch {epoch}, iteration {it}")
            sum_w += loss_w
            w = orthogonalize_array(w - state.map_lr * grad_w, cfg.beta)
            worst_orth = max(worst_orth, float(np.linalg.norm(w @ w.T - eye)))

        state.lr *= cfg.lr_decay
        state.map_lr *= cfg.lr_decay
        current = MappingMatrix(w, cfg.beta)
        crit = validation_criterion(current, src, tgt, criterion)
        record = {
            "epoch": epoch,
            "criterion": crit,
            "loss_d": sum_d / max(n_d, 1),
            "loss_w": sum_w / cfg.iterations_per_epoch,
            "disc_accuracy": sum_acc / max(n_d, 1),
            "lr": state.lr,
            "max_orth_error": worst_orth,
        }
        if crit > history.best_criterion:
            history.best_criterion = crit
            history.best_epoch = epoch
            state.best_w = w.copy()
        elif crit < history.best_criterion and cfg.shrink_on_criterion_drop:
            state.lr /= cfg.lr_shrink
            state.map_lr /= cfg.lr_shrink
            record["lr"] = state.lr
        if monitor is not None:
            record.update(monitor(current))
        history.epochs.append(record)
        logger.info("epoch %d: criterion %.5f  L_D %.4f  L_W %.4f  acc %.3f  (%.1fs)", epoch, crit,
                    record["loss_d"], record["loss_w"], record["disc_accuracy"],
                    time.perf_counter() - t0)
        state.w = w
        state.epoch = epoch + 1
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state, cfg)

    history.discriminator = disc
    best = MappingMatrix(state.best_w, cfg.beta,
                         {"best_epoch": history.best_epoch,
                          "best_criterion": history.best_criterion})
    return best, history
