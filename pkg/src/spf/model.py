"""The multi-branch patch classifier and its training/evaluation loop.

Each branch runs its own conv backbone over one skin patch; branch features
are concatenated channel-wise, globally average-pooled, and a linear head
produces two logits (index 0 = attack, index 1 = bona fide). Branch weights
are independent by default; `share_branch_weights` ties them.
"""

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics, nn, weights
from .errors import ConfigError, DataError, DivergenceError, ShapeError

log = logging.getLogger("spf.model")

DEFAULT_BACKBONE = ((16, 3, 1), (32, 3, 1), (64, 3, 1), (128, 3, 1))


class Label(IntEnum):
    ATTACK = 0
    BONA_FIDE = 1


@dataclass(frozen=True)
class Score:
    p_bona_fide: float
    p_attack: float

    def __post_init__(self):
        if abs(self.p_bona_fide + self.p_attack - 1.0) > 1e-6:
            raise ConfigError(f"score probabilities sum to "
                              f"{self.p_bona_fide + self.p_attack}, not 1")


@dataclass(frozen=True)
class DecisionConfig:
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0,1), got {self.threshold}")


def decide(score, cfg):
    """Threshold the bona-fide probability; equality rejects (fail closed)."""
    if metrics.accept(score.p_bona_fide, cfg.threshold):
        return Label.BONA_FIDE
    return Label.ATTACK


@dataclass(frozen=True)
class ModelConfig:
    branches: int = 2
    share_branch_weights: bool = False
    backbone: tuple = DEFAULT_BACKBONE
    head_dim: int = 0            # 0 = derive branches * last_channels
    patch_size: int = 64
    seed: int = 0
    # sample-local conditioning (no batch statistics); without these the
    # published SGD configuration cannot train the backbone from scratch
    normalize_inputs: bool = True
    normalize_features: bool = True

    def __post_init__(self):
        object.__setattr__(self, "backbone",
                           tuple(tuple(int(v) for v in blk) for blk in self.backbone))
        if self.branches not in (1, 2, 3):
            raise ConfigError(f"branches must be 1, 2 or 3, got {self.branches}")

    @property
    def feature_width(self):
        return self.branches * self.backbone[-1][0]

    def spatial_after_backbone(self):
        s = self.patch_size
        for _, kernel, stride in self.backbone:
            s = (s + 2 * (kernel // 2) - kernel) // stride + 1
            if s < 2 or s % 2:
                return 0
            s //= 2
        return s

    def to_dict(self):
        return {"branches": self.branches,
                "share_branch_weights": self.share_branch_weights,
                "backbone": [list(b) for b in self.backbone],
                "patch_size": self.patch_size, "seed": self.seed,
                "normalize_inputs": self.normalize_inputs,
                "normalize_features": self.normalize_features}

    @classmethod
    def from_dict(cls, d):
        return cls(branches=d["branches"],
                   share_branch_weights=d["share_branch_weights"],
                   backbone=tuple(tuple(b) for b in d["backbone"]),
                   patch_size=d["patch_size"], seed=d["seed"],
                   normalize_inputs=d.get("normalize_inputs", True),
                   normalize_features=d.get("normalize_features", True))


def _make_backbone(config, rng, prefix):
    layers = []
    in_ch = 3
    for i, (out_ch, kernel, stride) in enumerate(config.backbone):
        layers.append(nn.Conv2d(in_ch, out_ch, kernel, stride=stride,
                                padding=kernel // 2, rng=rng,
                                name=f"{prefix}.conv{i}"))
        layers.append(nn.ReLU())
        layers.append(nn.MaxPool2())
        in_ch = out_ch
    return nn.Sequential(layers)


def _tie_backbone(shared, prefix):
    """Fresh layer objects (separate caches) sharing the Parameters of
    `shared`, so several branches can run one physical backbone."""
    tied = []
    for layer in shared.layers:
        if isinstance(layer, nn.Conv2d):
            clone = copy.copy(layer)
            clone._cache = None
            tied.append(clone)
        elif isinstance(layer, nn.ReLU):
            tied.append(nn.ReLU())
        else:
            tied.append(nn.MaxPool2())
    return nn.Sequential(tied)


class Model:
    def __init__(self, config, branches, head):
        self.config = config
        self.branches = branches
        self.gap = nn.GlobalAvgPool()
        self.feature_norm = nn.RmsNorm() if config.normalize_features else None
        self.head = head
        self._forward_ready = False

    def parameters(self):
        seen, out = set(), []
        for branch in self.branches:
            for p in branch.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        out.extend(self.head.parameters())
        return out

    def num_parameters(self):
        return sum(p.value.size for p in self.parameters())

    def forward(self, branch_inputs):
        """branch_inputs: one (N,3,S,S) array per branch. Returns (N,2) logits."""
        if len(branch_inputs) != self.config.branches:
            raise ShapeError(f"model has {self.config.branches} branches but got "
                             f"{len(branch_inputs)} patch streams (arity mismatch)")
        if self.config.normalize_inputs:
            branch_inputs = [nn.standardize_patches(x) for x in branch_inputs]
        feats = [branch.forward(x) for branch, x in zip(self.branches, branch_inputs)]
        fused = np.concatenate(feats, axis=1)
        pooled = self.gap.forward(fused)
        if self.feature_norm is not None:
            pooled = self.feature_norm.forward(pooled)
        logits = self.head.forward(pooled)
        self._forward_ready = True
        return logits.reshape(logits.shape[0], 2)

    def backward(self, dlogits):
        if not self._forward_ready:
            raise ShapeError("backward called without a forward pass")
        self._forward_ready = False
        d = self.head.backward(dlogits.reshape(dlogits.shape[0], 2, 1, 1))
        if self.feature_norm is not None:
            d = self.feature_norm.backward(d)
        d = self.gap.backward(d)
        widths = [branch.layers[-3].weight.value.shape[0] for branch in self.branches]
        start = 0
        for branch, width in zip(self.branches, widths):
            branch.backward(np.ascontiguousarray(d[:, start:start + width]))
            start += width

    def probabilities(self, branch_inputs):
        return nn.softmax(self.forward(branch_inputs))

    def score(self, patchset):
        """Score one PatchSet; its arity must match the branch count."""
        patches = [np.asarray(p, dtype=np.float32) for p in patchset.patches]
        if len(patches) != self.config.branches:
            raise ShapeError(f"patch set has k={len(patches)} but the model has "
                             f"{self.config.branches} branches (arity mismatch)")
        p = self.probabilities(patches)[0]
        return Score(p_bona_fide=float(p[Label.BONA_FIDE]),
                     p_attack=float(p[Label.ATTACK]))

    def state(self):
        return [p.value.copy() for p in self.parameters()]

    def load_state(self, state):
        for p, v in zip(self.parameters(), state):
            p.value = v.copy()
            p.grad = np.zeros_like(p.value)


def clone_for_inference(m):
    """A Model sharing m's Parameters but with private layer caches, so
    several threads can run forward passes concurrently."""
    branches = [_tie_backbone(b, f"branch{i}") for i, b in enumerate(m.branches)]
    head = copy.copy(m.head)
    head._cache = None
    return Model(m.config, branches, head)  # gap/feature_norm built fresh


def model_digest(m):
    """sha256 over the current weights; changes whenever a different
    checkpoint is loaded."""
    h = hashlib.sha256()
    for p in m.parameters():
        h.update(p.value.astype(np.float32, copy=False).tobytes())
    return h.hexdigest()


def build(config):
    if config.spatial_after_backbone() < 1:
        raise ConfigError(f"backbone {config.backbone} collapses a "
                          f"{config.patch_size}px patch below 1x1")
    if config.head_dim and config.head_dim != config.feature_width:
        raise ConfigError(f"head_dim {config.head_dim} does not match the "
                          f"concatenated feature width {config.feature_width}")
    rng = np.random.default_rng(config.seed)
    first = _make_backbone(config, rng, "branch0")
    branches = [first]
    for i in range(1, config.branches):
        if config.share_branch_weights:
            branches.append(_tie_backbone(first, f"branch{i}"))
        else:
            branches.append(_make_backbone(config, rng, f"branch{i}"))
    head = nn.Linear(config.feature_width, 2, rng=rng, name="head")
    model = Model(config, branches, head)
    log.info("built %d-branch model, %d parameters", config.branches,
             model.num_parameters())
    return model


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path_w32, model):
    path_w32 = Path(path_w32)
    weights.save_parameters(path_w32, model.parameters())
    with open(path_w32.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(model.config.to_dict(), fh, indent=2)
        fh.write("\n")


def load_checkpoint(path_w32):
    path_w32 = Path(path_w32)
    with open(path_w32.with_suffix(".json"), "r", encoding="utf-8") as fh:
        config = ModelConfig.from_dict(json.load(fh))
    model = build(config)
    weights.load_into_parameters(path_w32, model.parameters())
    return model


def checkpoint_digest(path_w32):
    return hashlib.sha256(Path(path_w32).read_bytes()).hexdigest()


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    augment: bool = True
    rand_patch: bool = False      # random branch<-patch assignment per epoch
    val_threshold: float = 0.5


@dataclass
class TrainReport:
    history: list = field(default_factory=list)   # (epoch, train_loss, val_acer)
    best_epoch: int = -1
    best_val_acer: float = float("inf")

    def history_csv(self):
        lines = ["epoch,train_loss,val_acer"]
        for e, loss, acer in self.history:
            lines.append(f"{e},{loss:.6f},{acer:.6f}")
        return "\n".join(lines) + "\n"


def _branch_views(patches, branch_count, rng=None):
    """Split (N, 3, 3, S, S) sample patches into per-branch (N,3,S,S) arrays."""
    n, avail = patches.shape[0], patches.shape[1]
    if branch_count > avail:
        raise ShapeError(f"model needs {branch_count} patches per sample but the "
                         f"dataset stores {avail} (arity mismatch)")
    if rng is None:
        picks = np.broadcast_to(np.arange(branch_count), (n, branch_count))
    else:
        picks = np.stack([rng.choice(avail, size=branch_count, replace=False)
                          for _ in range(n)])
    return [patches[np.arange(n), picks[:, j]] for j in range(branch_count)]


def score_dataset(model, dataset, batch_size=64):
    """Bona-fide probability for every sample, batched for throughput."""
    probs = np.empty(len(dataset), dtype=np.float64)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.patches[start:start + batch_size]
        views = _branch_views(chunk, model.config.branches)
        p = model.probabilities(views)
        probs[start:start + len(chunk)] = p[:, Label.BONA_FIDE]
    return probs


def evaluate(model, dataset, cfg=DecisionConfig()):
    """MetricsReport at cfg.threshold plus the raw (score, label) pairs.

    Single-class datasets report the defined rate and None for the other.
    """
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    probs = score_dataset(model, dataset)
    pairs = list(zip(probs.tolist(), dataset.labels.tolist()))
    return metrics.report_at(pairs, cfg.threshold, strict=False), pairs


def train(model, train_set, val_set, cfg=TrainConfig()):
    """Shuffled minibatch SGD per the published training configuration,
    keeping the weights from the best-validation-ACER epoch."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("train and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    report = TrainReport()
    best_state = model.state()

    for epoch in range(cfg.epochs):
        losses, sizes = [], []
        pick_rng = rng if cfg.rand_patch else None
        for batch_idx in data_mod.iterate_batches(len(train_set), cfg.batch_size, rng):
            chunk = train_set.patches[batch_idx]
            views = _branch_views(chunk, model.config.branches, pick_rng)
            if cfg.augment:
                views = [data_mod.augment_batch(v, rng) for v in views]
            logits = model.forward(views)
            loss, dlogits = nn.softmax_cross_entropy(logits, train_set.labels[batch_idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            nn.zero_grads(params)
            model.backward(dlogits)
            nn.sgd_step(params, cfg.learning_rate)
            losses.append(loss)
            sizes.append(len(batch_idx))

        train_loss = float(np.average(losses, weights=sizes))
        val_report, _ = evaluate(model, val_set, DecisionConfig(cfg.val_threshold))
        if val_report.acer is None:
            raise DataError("validation set must contain both classes")
        report.history.append((epoch, train_loss, val_report.acer))
        if val_report.acer < report.best_val_acer:
            report.best_val_acer = val_report.acer
            report.best_epoch = epoch
            best_state = model.state()
        log.info("epoch %d: train loss %.4f, val ACER %.4f",
                 epoch, train_loss, val_report.acer)

    model.load_state(best_state)
    return report
