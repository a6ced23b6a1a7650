"""Train the classifier head, then the alignment map + variance head.

The alignment backbone maps old-model features to the new feature space;
a linear head on the transformed embedding predicts the log variance of
the per-item alignment error. Both train jointly against the combined
objective while the classifier head stays frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FeatureSet, FormatError, PairedFeatureSet
from .losses import LossConfig, loss_combined, loss_disc, loss_uncertain
from .tensornet import (
    DenseNet,
    Layer,
    LrSchedule,
    OptimizerState,
    TrainingError,
    adam_step,
    backward,
    dense_from_bytes,
    dense_to_bytes,
    forward,
    init_dense,
)

FFA_MAGIC = b"FFA1"


@dataclass
class ClassifierHead:
    """Linear softmax head over the new feature space."""

    weights: np.ndarray  # (k, d)
    bias: np.ndarray  # (k,)

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("head weights must be (k, d) with bias (k,)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("head parameters must be finite")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return np.asarray(feats, dtype=np.float64) @ self.weights.T + self.bias

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weights.copy(), self.bias.copy())


@dataclass
class AlignNet:
    """Alignment backbone plus the linear log-variance head it shares."""

    backbone: DenseNet
    sigma_w: np.ndarray  # (d_out,)
    sigma_b: np.ndarray  # (1,)

    def __post_init__(self):
        self.sigma_w = np.ascontiguousarray(self.sigma_w, dtype=np.float64)
        self.sigma_b = np.ascontiguousarray(self.sigma_b, dtype=np.float64)
        if self.sigma_w.shape != (self.backbone.output_dim,):
            raise ValueError("sigma head input dim must match backbone output dim")
        if self.sigma_b.shape != (1,):
            raise ValueError("sigma bias must have shape (1,)")

    def parameters(self) -> list[np.ndarray]:
        return self.backbone.parameters() + [self.sigma_w, self.sigma_b]

    def log_sigma2(self, h_out: np.ndarray) -> np.ndarray:
        return h_out @ self.sigma_w + self.sigma_b[0]


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 256
    base_lr: float = 1e-3
    warmup_epochs: int = 2
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    hidden_width_factor: int = 4

    def validate(self, n_train: int) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if n_train and self.batch_size > n_train:
            raise ValueError("batch_size must not exceed the training set size")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        self.loss.validate()


@dataclass
class AlignmentResult:
    net: AlignNet
    epoch_losses: list[float]


def _schedule_for(cfg: TrainConfig, n: int) -> tuple[LrSchedule, int]:
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    return (
        LrSchedule(
            base_lr=cfg.base_lr,
            warmup_steps=cfg.warmup_epochs * steps_per_epoch,
            total_steps=cfg.epochs * steps_per_epoch,
        ),
        steps_per_epoch,
    )


def train_head(train_new: FeatureSet, cfg: TrainConfig) -> ClassifierHead:
    """Fit the linear softmax head on new-model training features.

    Plain cross entropy (no smoothing), Adam with the configured schedule,
    zero init. Labels must be contiguous 0..k-1 with k >= 2.
    """
    labels = train_new.labels
    if len(train_new) == 0:
        raise ValueError("empty training set")
    k = int(labels.max()) + 1
    if k < 2:
        raise ValueError("head training needs at least two classes")
    if sorted(np.unique(labels)) != list(range(k)):
        raise ValueError("labels must be contiguous 0..k-1")
    cfg.validate(len(train_new))

    x = train_new.vectors.astype(np.float64)
    n, d = x.shape
    head = ClassifierHead(np.zeros((k, d)), np.zeros(k))
    schedule, _ = _schedule_for(cfg, n)
    state = OptimizerState.for_params([head.weights, head.bias], schedule)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            xb, yb = x[rows], labels[rows]
            logits = head.logits(xb)
            _, g = loss_disc(logits, yb, 0.0)
            g /= len(rows)
            adam_step(
                [head.weights, head.bias], [g.T @ xb, g.sum(axis=0)], state
            )
    return head


def batch_objective(net: AlignNet, head: ClassifierHead, x_old: np.ndarray,
                    x_new: np.ndarray, labels: np.ndarray, loss_cfg: LossConfig,
                    lam: float) -> tuple[float, list[np.ndarray]]:
    """Mean batch loss and its exact gradients for every AlignNet parameter.

    The discriminative gradient reaches the backbone through the frozen
    head; the log-variance gradient reaches it through the shared sigma
    head. Gradient order matches ``net.parameters()``.
    """
    h_out, tape = forward(net.backbone, x_old)
    s = net.log_sigma2(h_out)
    logits = head.logits(h_out)
    base, g_h, g_logits = loss_combined(h_out, x_new, logits, labels, loss_cfg)
    if loss_cfg.uncertainty:
        total, d_base, d_s = loss_uncertain(base, s, lam)
    else:
        total = base
        d_base = np.ones_like(base)
        d_s = np.zeros_like(base)
    n = x_old.shape[0]
    grad_h = d_base[:, None] * (g_h + g_logits @ head.weights)
    grad_h += d_s[:, None] * net.sigma_w
    bb = backward(net.backbone, tape, grad_h / n)
    d_sigma_w = (d_s @ h_out) / n
    d_sigma_b = np.array([d_s.mean()])
    return float(total.mean()), bb.flat() + [d_sigma_w, d_sigma_b]


def batch_loss(net: AlignNet, head: ClassifierHead, x_old, x_new, labels,
               loss_cfg: LossConfig, lam: float) -> float:
    """Value-only evaluation of the same batch objective."""
    h_out, _ = forward(net.backbone, x_old)
    base, _, _ = loss_combined(
        h_out, x_new, head.logits(h_out), labels, loss_cfg
    )
    if loss_cfg.uncertainty:
        total, _, _ = loss_uncertain(base, net.log_sigma2(h_out), lam)
    else:
        total = base
    return float(total.mean())


def per_item_loss(net: AlignNet, head: ClassifierHead, pairs: PairedFeatureSet,
                  loss_cfg: LossConfig) -> np.ndarray:
    """Per-item combined loss of transformed old features vs their pairs."""
    h_out, _ = forward(net.backbone, pairs.old.vectors.astype(np.float64))
    base, _, _ = loss_combined(
        h_out,
        pairs.new.vectors.astype(np.float64),
        head.logits(h_out),
        pairs.new.labels,
        loss_cfg,
    )
    return base


def new_align_net(dim: int, rng: np.random.Generator,
                  hidden_width_factor: int = 4) -> AlignNet:
    """Default architecture: d -> 2 hidden relu layers of width factor*d -> d,
    sigma head zero-initialized (sigma^2 starts at 1)."""
    width = hidden_width_factor * dim
    backbone = init_dense(
        [dim, width, width, dim], ("relu", "relu", "identity"), rng
    )
    return AlignNet(backbone=backbone, sigma_w=np.zeros(dim), sigma_b=np.zeros(1))


def train_alignment(pairs: PairedFeatureSet, head: ClassifierHead,
                    cfg: TrainConfig) -> AlignmentResult:
    """Jointly train the alignment map and variance head; head stays frozen.

    Aborts with :class:`TrainingError` (naming the step) on a non-finite
    loss. Deterministic for a fixed config and seed.
    """
    n = len(pairs)
    if n == 0:
        raise ValueError("empty training pairs")
    cfg.validate(n)
    d = pairs.new.dim
    if head.dim != d:
        raise ValueError(f"head dim {head.dim} != feature dim {d}")
    if int(pairs.new.labels.max()) >= head.num_classes:
        raise ValueError("head does not cover all training labels")

    lam = cfg.loss.resolved_lam(d)
    rng = np.random.default_rng(cfg.seed)
    net = new_align_net(d, rng, cfg.hidden_width_factor)
    params = net.parameters()
    schedule, _ = _schedule_for(cfg, n)
    state = OptimizerState.for_params(params, schedule)

    x_old = pairs.old.vectors.astype(np.float64)
    x_new = pairs.new.vectors.astype(np.float64)
    labels = pairs.new.labels

    epoch_losses: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        seen = 0
        acc = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            loss, grads = batch_objective(
                net, head, x_old[rows], x_new[rows], labels[rows], cfg.loss, lam
            )
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {state.step + 1}")
            adam_step(params, grads, state)
            acc += loss * len(rows)
            seen += len(rows)
        epoch_losses.append(acc / seen)
    return AlignmentResult(net=net, epoch_losses=epoch_losses)


def transform(net: AlignNet, feats: FeatureSet) -> FeatureSet:
    """Map a feature set through the backbone; ids/labels/subgroups kept."""
    if feats.dim != net.backbone.input_dim:
        raise ValueError(
            f"feature dim {feats.dim} != net input dim {net.backbone.input_dim}"
        )
    if len(feats) == 0:
        return feats
    out, _ = forward(net.backbone, feats.vectors.astype(np.float64))
    return feats.with_vectors(out.astype(np.float32))


def predict_sigma(net: AlignNet, feats: FeatureSet) -> np.ndarray:
    """Per-record predicted variance sigma^2 = exp(s); strictly positive."""
    if feats.dim != net.backbone.input_dim:
        raise ValueError(
            f"feature dim {feats.dim} != net input dim {net.backbone.input_dim}"
        )
    if len(feats) == 0:
        return np.zeros(0)
    h_out, _ = forward(net.backbone, feats.vectors.astype(np.float64))
    return np.exp(net.log_sigma2(h_out))


def head_to_dense(head: ClassifierHead) -> DenseNet:
    return DenseNet([Layer(head.weights.copy(), head.bias.copy(), "identity")])


def save_head(head: ClassifierHead, path) -> None:
    Path(path).write_bytes(dense_to_bytes(head_to_dense(head)))


def load_head(path) -> ClassifierHead:
    net = dense_from_bytes(Path(path).read_bytes())
    if len(net.layers) != 1 or net.layers[0].activation != "identity":
        raise FormatError("head checkpoint must hold one identity layer", 4)
    layer = net.layers[0]
    return ClassifierHead(layer.weights, layer.bias)


def alignnet_to_bytes(net: AlignNet) -> bytes:
    d = net.backbone.output_dim
    return b"".join(
        [
            FFA_MAGIC,
            np.array([d], dtype="<u4").tobytes(),
            net.sigma_w.astype("<f8").tobytes(),
            net.sigma_b.astype("<f8").tobytes(),
            dense_to_bytes(net.backbone),
        ]
    )


def alignnet_from_bytes(data: bytes) -> AlignNet:
    if data[:4] != FFA_MAGIC:
        raise FormatError("bad magic", 0)
    if len(data) < 8:
        raise FormatError("truncated header", 4)
    (d,) = np.frombuffer(data[4:8], dtype="<u4")
    d = int(d)
    end = 8 + 8 * (d + 1)
    if len(data) < end:
        raise FormatError("truncated sigma head", 8)
    sigma_w = np.frombuffer(data[8 : 8 + 8 * d], dtype="<f8").copy()
    sigma_b = np.frombuffer(data[8 + 8 * d : end], dtype="<f8").copy()
    backbone = dense_from_bytes(data[end:])
    return AlignNet(backbone=backbone, sigma_w=sigma_w, sigma_b=sigma_b)


def save_alignnet(net: AlignNet, path) -> None:
    Path(path).write_bytes(alignnet_to_bytes(net))


def load_alignnet(path) -> AlignNet:
    return alignnet_from_bytes(Path(path).read_bytes())
