#!/usr/bin/env python3
"""
Open-Set Classifier - K-way PUF image classifier plus a feature-space GAN
whose discriminator scores how "known" an image is.

Pipeline:
1. train_closed_set: compact CNN on enrolled devices (cross-entropy, AdamW)
2. train_open_gan: generator/discriminator on frozen pre-logit features
3. calibrate_threshold: pick (checkpoint, tau) on validation legit + impostors
4. authenticate_image: accept iff P_open > tau and argmax == claimed label

Labels are 0-based class indices (device order in the registry).

Actions:
- manifest_info: summary of a saved model manifest
"""

import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score

from tools.errors import (
    CalibrationImpossible,
    EmptyClass,
    EvaluationImpossible,
    FormatError,
    PufAuthError,
    ShapeMismatch,
    TrainingDiverged,
)
from tools.imaging import ModelInput

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
LOW_SEPARATION_AUROC = 0.75
INFERENCE_BATCH = 256


# ============================================================================
# DATA
# ============================================================================

@dataclass
class LabeledDataset:
    inputs: np.ndarray                  # (N, 3, H, W) float32
    labels: np.ndarray                  # (N,) int64 class index
    split: str = "train"
    device_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.inputs.ndim != 4 or len(self.inputs) != len(self.labels):
            raise ShapeMismatch(f"inputs {self.inputs.shape} do not match {len(self.labels)} labels")
        if self.device_ids is not None:
            self.device_ids = np.asarray(self.device_ids, dtype=np.int64).ravel()

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_inputs(cls, items: Sequence[Tuple[ModelInput, int]], split: str = "train",
                    device_ids: Optional[Sequence[int]] = None) -> "LabeledDataset":
        if not items:
            return cls.empty(split)
        inputs = np.stack([x.data for x, _ in items])
        labels = np.array([y for _, y in items], dtype=np.int64)
        return cls(inputs, labels, split, None if device_ids is None else np.asarray(device_ids))

    @classmethod
    def empty(cls, split: str, shape: Tuple[int, int, int] = (3, 1, 1)) -> "LabeledDataset":
        return cls(np.zeros((0, *shape), dtype=np.float32), np.zeros(0, dtype=np.int64), split,
                   np.zeros(0, dtype=np.int64))

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)[:num_classes]


# ============================================================================
# NETWORKS
# ============================================================================

class CompactBackbone(nn.Module):
    """Three stride-2 conv blocks, pooled to pool_grid x pool_grid, then a d-dim projection."""

    def __init__(self, num_classes: int, feature_dim: int = 64, pool_grid: int = 4, in_channels: int = 3):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 16, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(pool_grid),
        )
        self.projection = nn.Linear(64 * pool_grid * pool_grid, feature_dim)
        self.classifier = nn.Linear(feature_dim, num_classes)

    def forward(self, x):
        h = self.features(x).flatten(1)
        feature = F.relu(self.projection(h))
        return self.classifier(feature), feature


class Generator(nn.Module):
    def __init__(self, z_dim: int, hidden: int, feature_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(z_dim, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, feature_dim),
        )

    def forward(self, z):
        return self.net(z)


class Discriminator(nn.Module):
    def __init__(self, feature_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
            nn.Sigmoid(),
        )

    def forward(self, f):
        return self.net(f).squeeze(-1)


@dataclass
class BackboneModel:
    network: CompactBackbone
    num_classes: int
    feature_dim: int
    pool_grid: int
    input_shape: Tuple[int, int, int]
    norm_mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    hyperparameters: Dict = field(default_factory=dict)
    final_train_loss: float = float("nan")
    train_accuracy: float = float("nan")
    frozen: bool = False

    def freeze(self) -> None:
        self.network.eval()
        for p in self.network.parameters():
            p.requires_grad_(False)
        self.frozen = True

    def parameter_bytes(self) -> bytes:
        return b"".join(t.detach().cpu().numpy().tobytes() for t in self.network.state_dict().values())


@dataclass
class GanPair:
    generator: Generator
    discriminator: Discriminator
    z_dim: int
    n_g: int
    n_d: int
    checkpoints: List[Dict[str, torch.Tensor]] = field(default_factory=list)
    losses: List[Dict[str, float]] = field(default_factory=list)


@dataclass
class OpenSetModel:
    backbone: BackboneModel
    discriminator: Discriminator
    tau: float
    n_d: int
    selected_epoch: int = -1
    val_f1: float = float("nan")
    val_auroc: float = float("nan")
    rule: str = "f1"
    low_separation: bool = False


@dataclass
class AuthDecision:
    accept: bool
    predicted: int
    p_open: float
    reason: str


@dataclass
class MetricsReport:
    closed_set_accuracy: float
    far: Optional[float]
    frr: Optional[float]
    auroc: Optional[float]
    f1: Optional[float]
    n_legit: int
    n_impostor: int

    def to_dict(self) -> Dict:
        return {
            "closed_set_accuracy": self.closed_set_accuracy,
            "far": self.far,
            "frr": self.frr,
            "auroc": self.auroc,
            "f1": self.f1,
            "n_legit": self.n_legit,
            "n_impostor": self.n_impostor,
        }


# ============================================================================
# INFERENCE HELPERS
# ============================================================================

def _batches(n: int, batch_size: int, order: Optional[torch.Tensor] = None):
    idx = order if order is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def _check_inputs(model: BackboneModel, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float32)
    if inputs.ndim == 3:
        inputs = inputs[None]
    if tuple(inputs.shape[1:]) != tuple(model.input_shape):
        raise ShapeMismatch(f"input shape {tuple(inputs.shape[1:])} != trained shape {tuple(model.input_shape)}")
    return inputs


@torch.no_grad()
def forward_batch(model: BackboneModel, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(logits (N, K), features (N, d)) in inference mode."""
    inputs = _check_inputs(model, inputs)
    was_training = model.network.training
    model.network.eval()
    logits, feats = [], []
    x_all = torch.from_numpy(inputs)
    for idx in _batches(len(inputs), INFERENCE_BATCH):
        lg, ft = model.network(x_all[idx])
        logits.append(lg)
        feats.append(ft)
    model.network.train(was_training)
    if not logits:
        return np.zeros((0, model.num_classes), np.float32), np.zeros((0, model.feature_dim), np.float32)
    return torch.cat(logits).numpy(), torch.cat(feats).numpy()


def extract_feature(model: BackboneModel, x: ModelInput) -> np.ndarray:
    data = x.data if isinstance(x, ModelInput) else np.asarray(x)
    if np.ndim(data) != 3:
        raise ShapeMismatch(f"expected a (3, H, W) input, got {np.shape(data)}")
    return forward_batch(model, data)[1][0]


def extract_features(model: BackboneModel, data: LabeledDataset) -> np.ndarray:
    return forward_batch(model, data.inputs)[1]


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """argmax; the lowest class index wins ties."""
    return np.argmax(np.asarray(logits), axis=1)


@torch.no_grad()
def discriminator_scores(discriminator: Discriminator, features: np.ndarray) -> np.ndarray:
    discriminator.eval()
    if len(features) == 0:
        return np.zeros(0, dtype=np.float32)
    return discriminator(torch.from_numpy(np.asarray(features, dtype=np.float32))).numpy()


# ============================================================================
# CLOSED-SET TRAINING
# ============================================================================

def train_closed_set(data: LabeledDataset, hp, seed: int, num_classes: Optional[int] = None,
                     norm_mean=(0.5, 0.5, 0.5), norm_std=(0.5, 0.5, 0.5)) -> BackboneModel:
    """
    Cross-entropy with decoupled weight decay (AdamW). `hp` is a
    system_guard.ClosedSetParams. Batches are reshuffled every epoch from a
    generator seeded with `seed`; the last partial batch is kept.
    """
    k = int(num_classes if num_classes is not None else (data.labels.max() + 1 if len(data) else 0))
    if k < 2:
        raise EmptyClass(f"at least 2 classes are required, got {k}")
    counts = data.class_counts(k)
    if np.any(counts == 0):
        missing = [int(c) for c in np.flatnonzero(counts == 0)]
        raise EmptyClass(f"classes {missing} have no training images")
    if np.any(data.labels >= k) or np.any(data.labels < 0):
        raise ValueError(f"labels must lie in 0..{k - 1}")

    torch.manual_seed(seed)
    shuffle = torch.Generator().manual_seed(seed)
    network = CompactBackbone(k, hp.feature_dim, hp.pool_grid, in_channels=data.input_shape[0])
    optimizer = torch.optim.AdamW(network.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)

    x_all = torch.from_numpy(data.inputs)
    y_all = torch.from_numpy(data.labels)
    n = len(data)
    epoch_loss = float("nan")
    for epoch in range(hp.epochs):
        network.train()
        total = 0.0
        correct = 0
        for idx in _batches(n, hp.batch_size, torch.randperm(n, generator=shuffle)):
            logits, _ = network(x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"closed-set loss became {loss.item()} in epoch {epoch + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(dim=1) == y_all[idx]).sum())
        epoch_loss = total / n
        logger.info(f"Closed-set epoch {epoch + 1}/{hp.epochs}: loss={epoch_loss:.4f} acc={correct / n:.4f}")

    model = BackboneModel(
        network=network,
        num_classes=k,
        feature_dim=hp.feature_dim,
        pool_grid=hp.pool_grid,
        input_shape=data.input_shape,
        norm_mean=tuple(norm_mean),
        norm_std=tuple(norm_std),
        hyperparameters=hp.model_dump() if hasattr(hp, "model_dump") else dict(hp),
        final_train_loss=epoch_loss,
    )
    logits, _ = forward_batch(model, data.inputs)
    model.train_accuracy = float(np.mean(predict_labels(logits) == data.labels))
    return model


def closed_set_accuracy(model: BackboneModel, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise EvaluationImpossible("no legitimate samples to evaluate")
    logits, _ = forward_batch(model, data.inputs)
    return float(np.mean(predict_labels(logits) == data.labels))


# ============================================================================
# OPEN-SET GAN
# ============================================================================

def train_open_gan(backbone: BackboneModel, data: LabeledDataset, hp, seed: int) -> GanPair:
    """
    Adversarial training in feature space on legitimate training features
    only. `hp` is a system_guard.GanParams. The backbone is frozen first and
    stays bit-identical. One discriminator checkpoint is kept per epoch.
    """
    backbone.freeze()
    real_all = torch.from_numpy(extract_features(backbone, data))
    if len(real_all) == 0:
        raise EmptyClass("no training features for the GAN")

    torch.manual_seed(seed)
    noise = torch.Generator().manual_seed(seed + 1)
    generator = Generator(hp.z_dim, hp.n_g, backbone.feature_dim)
    discriminator = Discriminator(backbone.feature_dim, hp.n_d)
    opt_g = torch.optim.AdamW(generator.parameters(), lr=hp.lr_g, betas=tuple(hp.betas), weight_decay=hp.weight_decay)
    opt_d = torch.optim.AdamW(discriminator.parameters(), lr=hp.lr_d, betas=tuple(hp.betas), weight_decay=hp.weight_decay)

    pair = GanPair(generator, discriminator, hp.z_dim, hp.n_g, hp.n_d)
    n = len(real_all)
    for epoch in range(hp.epochs):
        generator.train()
        discriminator.train()
        sum_d = sum_g = 0.0
        for idx in _batches(n, hp.batch_size, torch.randperm(n, generator=noise)):
            b = len(idx)
            real = real_all[idx]

            z = torch.randn(b, hp.z_dim, generator=noise)
            fake = generator(z).detach()
            loss_d = (F.binary_cross_entropy(discriminator(real), torch.full((b,), hp.real_label))
                      + hp.lambda_g * F.binary_cross_entropy(discriminator(fake), torch.full((b,), hp.fake_label)))
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            z = torch.randn(b, hp.z_dim, generator=noise)
            loss_g = hp.lambda_g * F.binary_cross_entropy(discriminator(generator(z)), torch.full((b,), hp.real_label))
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            if not (torch.isfinite(loss_d) and torch.isfinite(loss_g)):
                raise TrainingDiverged(f"GAN loss became non-finite in epoch {epoch + 1}")
            sum_d += loss_d.item() * b
            sum_g += loss_g.item() * b

        pair.checkpoints.append({k: v.detach().clone() for k, v in discriminator.state_dict().items()})
        pair.losses.append({"d": sum_d / n, "g": sum_g / n})
        logger.info(f"GAN epoch {epoch + 1}/{hp.epochs}: loss_d={sum_d / n:.4f} loss_g={sum_g / n:.4f}")

    discriminator.eval()
    generator.eval()
    return pair


# ============================================================================
# THRESHOLDS AND METRICS
# ============================================================================

def open_set_metrics(legit_scores: np.ndarray, legit_correct: np.ndarray,
                     impostor_scores: np.ndarray, tau: float) -> Dict[str, Optional[float]]:
    """
    Accept/reject metrics with legit-accept as the positive class. A legit
    sample counts as accepted only when its score clears tau and its
    predicted label is right; impostors are scored against their best claim.
    """
    legit_scores = np.asarray(legit_scores, dtype=np.float64)
    legit_correct = np.asarray(legit_correct, dtype=bool)
    impostor_scores = np.asarray(impostor_scores, dtype=np.float64)
    tp = int(np.sum((legit_scores > tau) & legit_correct))
    fn = len(legit_scores) - tp
    fp = int(np.sum(impostor_scores > tau))
    denom = 2 * tp + fp + fn
    out = {
        "far": fp / len(impostor_scores) if len(impostor_scores) else None,
        "frr": fn / len(legit_scores) if len(legit_scores) else None,
        "f1": 2 * tp / denom if denom else 0.0,
        "auroc": None,
    }
    if len(legit_scores) and len(impostor_scores):
        labels = np.concatenate([np.ones(len(legit_scores)), np.zeros(len(impostor_scores))])
        out["auroc"] = float(roc_auc_score(labels, np.concatenate([legit_scores, impostor_scores])))
    return out


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive distinct scores plus one below the minimum."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    lowest = u[0] / 2.0 if u[0] > 0 else np.nextafter(0.0, 1.0)
    return np.concatenate([[lowest], (u[:-1] + u[1:]) / 2.0])


def select_threshold(legit_scores: np.ndarray, legit_correct: np.ndarray, impostor_scores: np.ndarray,
                     rule: str = "f1") -> Tuple[float, float, float]:
    """
    Sweep tau over the pooled scores. rule="f1" maximizes F1; rule="eer"
    minimizes |FAR - FRR|. Ties go to the lowest tau. Returns (tau, f1, objective).
    """
    if len(impostor_scores) == 0:
        raise CalibrationImpossible("validation impostor set is empty")
    if len(legit_scores) == 0:
        raise CalibrationImpossible("validation legit set is empty")
    legit_scores = np.asarray(legit_scores, dtype=np.float64)
    legit_correct = np.asarray(legit_correct, dtype=bool)
    impostor_scores = np.asarray(impostor_scores, dtype=np.float64)
    taus = candidate_thresholds(np.concatenate([legit_scores, impostor_scores]))

    tp = np.sum((legit_scores[None, :] > taus[:, None]) & legit_correct[None, :], axis=1)
    fn = len(legit_scores) - tp
    fp = np.sum(impostor_scores[None, :] > taus[:, None], axis=1)
    f1 = 2 * tp / np.maximum(2 * tp + fp + fn, 1)

    if rule == "f1":
        best = int(np.argmax(f1))
        return float(taus[best]), float(f1[best]), float(f1[best])
    if rule == "eer":
        gap = np.abs(fp / len(impostor_scores) - fn / len(legit_scores))
        best = int(np.argmin(gap))
        eer = (fp[best] / len(impostor_scores) + fn[best] / len(legit_scores)) / 2.0
        return float(taus[best]), float(f1[best]), float(eer)
    raise ValueError(f"unknown threshold rule '{rule}'")


def _discriminator_from(state: Dict[str, torch.Tensor], feature_dim: int, n_d: int) -> Discriminator:
    disc = Discriminator(feature_dim, n_d)
    disc.load_state_dict(state)
    disc.eval()
    for p in disc.parameters():
        p.requires_grad_(False)
    return disc


def calibrate_threshold(gan: GanPair, backbone: BackboneModel, val_legit: LabeledDataset,
                        val_impostor: LabeledDataset, rule: str = "f1") -> OpenSetModel:
    """Jointly select the discriminator checkpoint and tau on validation data."""
    if len(val_impostor) == 0:
        raise CalibrationImpossible("validation impostor set is empty")
    if len(val_legit) == 0:
        raise CalibrationImpossible("validation legit set is empty")
    checkpoints = gan.checkpoints or [gan.discriminator.state_dict()]

    legit_logits, legit_feats = forward_batch(backbone, val_legit.inputs)
    legit_correct = predict_labels(legit_logits) == val_legit.labels
    _, imp_feats = forward_batch(backbone, val_impostor.inputs)

    best = None
    for epoch, state in enumerate(checkpoints):
        disc = _discriminator_from(state, backbone.feature_dim, gan.n_d)
        ls = discriminator_scores(disc, legit_feats)
        ims = discriminator_scores(disc, imp_feats)
        tau, f1, objective = select_threshold(ls, legit_correct, ims, rule)
        key = objective if rule == "f1" else -objective
        # Strict comparison keeps the earliest checkpoint on ties
        if best is None or key > best[0]:
            auroc = open_set_metrics(ls, legit_correct, ims, tau)["auroc"]
            best = (key, epoch, tau, f1, auroc, disc)

    _, epoch, tau, f1, auroc, disc = best
    low_separation = auroc is not None and auroc < LOW_SEPARATION_AUROC
    if low_separation:
        logger.warning(f"LowSeparation: validation AUROC {auroc:.3f} at selected checkpoint {epoch + 1}")
    logger.info(f"Selected checkpoint {epoch + 1}/{len(checkpoints)}: tau={tau:.4f} val_f1={f1:.4f} rule={rule}")
    return OpenSetModel(backbone, disc, tau, gan.n_d, selected_epoch=epoch, val_f1=f1,
                        val_auroc=float(auroc) if auroc is not None else float("nan"),
                        rule=rule, low_separation=low_separation)


def score_dataset(model: OpenSetModel, data: LabeledDataset) -> Tuple[np.ndarray, np.ndarray]:
    """(predicted labels, P_open) for every sample."""
    logits, feats = forward_batch(model.backbone, data.inputs)
    return predict_labels(logits), discriminator_scores(model.discriminator, feats)


def authenticate_image(model: OpenSetModel, x: ModelInput, claimed_id: int) -> AuthDecision:
    data = _check_inputs(model.backbone, x.data if isinstance(x, ModelInput) else x)
    with torch.no_grad():
        logits, feature = model.backbone.network(torch.from_numpy(data))
        p_open = float(model.discriminator(feature)[0])
    predicted = int(predict_labels(logits.numpy())[0])
    if p_open <= model.tau:
        return AuthDecision(False, predicted, p_open, "low_confidence")
    if predicted != claimed_id:
        return AuthDecision(False, predicted, p_open, "identity_mismatch")
    return AuthDecision(True, predicted, p_open, "ok")


def evaluate(model: OpenSetModel, test_legit: LabeledDataset, test_impostor: LabeledDataset) -> MetricsReport:
    if len(test_legit) == 0:
        raise EvaluationImpossible("test legit set is empty")
    legit_pred, legit_scores = score_dataset(model, test_legit)
    legit_correct = legit_pred == test_legit.labels
    imp_scores = score_dataset(model, test_impostor)[1] if len(test_impostor) else np.zeros(0)
    m = open_set_metrics(legit_scores, legit_correct, imp_scores, model.tau)
    return MetricsReport(
        closed_set_accuracy=float(np.mean(legit_correct)),
        far=m["far"],
        frr=m["frr"],
        auroc=m["auroc"],
        f1=m["f1"],
        n_legit=len(test_legit),
        n_impostor=len(test_impostor),
    )


# ============================================================================
# MANIFEST
# ============================================================================

def save_manifest(path: str, model: OpenSetModel, extra: Optional[Dict] = None) -> None:
    """torch.save of plain containers and tensors so loading works with weights_only=True."""
    bb = model.backbone
    payload = {
        "format_version": MANIFEST_VERSION,
        "num_classes": bb.num_classes,
        "feature_dim": bb.feature_dim,
        "pool_grid": bb.pool_grid,
        "input_shape": list(bb.input_shape),
        "norm_mean": list(bb.norm_mean),
        "norm_std": list(bb.norm_std),
        "backbone_state": bb.network.state_dict(),
        "discriminator_state": model.discriminator.state_dict(),
        "n_d": model.n_d,
        "tau": float(model.tau),
        "selection": {
            "epoch": model.selected_epoch,
            "val_f1": float(model.val_f1),
            "val_auroc": float(model.val_auroc),
            "rule": model.rule,
            "low_separation": bool(model.low_separation),
        },
        "training": {
            "hyperparameters": bb.hyperparameters,
            "final_train_loss": float(bb.final_train_loss),
            "train_accuracy": float(bb.train_accuracy),
        },
        "extra": extra or {},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(payload, path)
    logger.info(f"Model manifest written: {path}")


def load_manifest(path: str) -> Tuple[OpenSetModel, Dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise FormatError(f"{path}: unreadable model manifest ({e})")
    if not isinstance(payload, dict) or payload.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version")

    network = CompactBackbone(payload["num_classes"], payload["feature_dim"], payload["pool_grid"],
                              in_channels=payload["input_shape"][0])
    network.load_state_dict(payload["backbone_state"])
    training = payload.get("training", {})
    backbone = BackboneModel(
        network=network,
        num_classes=payload["num_classes"],
        feature_dim=payload["feature_dim"],
        pool_grid=payload["pool_grid"],
        input_shape=tuple(payload["input_shape"]),
        norm_mean=tuple(payload["norm_mean"]),
        norm_std=tuple(payload["norm_std"]),
        hyperparameters=training.get("hyperparameters", {}),
        final_train_loss=training.get("final_train_loss", float("nan")),
        train_accuracy=training.get("train_accuracy", float("nan")),
    )
    backbone.freeze()
    sel = payload.get("selection", {})
    model = OpenSetModel(
        backbone=backbone,
        discriminator=_discriminator_from(payload["discriminator_state"], payload["feature_dim"], payload["n_d"]),
        tau=payload["tau"],
        n_d=payload["n_d"],
        selected_epoch=sel.get("epoch", -1),
        val_f1=sel.get("val_f1", float("nan")),
        val_auroc=sel.get("val_auroc", float("nan")),
        rule=sel.get("rule", "f1"),
        low_separation=sel.get("low_separation", False),
    )
    return model, payload.get("extra", {})


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ============================================================================
# ACTIONS
# ============================================================================

ACTIONS = {
    "manifest_info": {
        "description": "Summary of a saved model manifest.",
        "params": {"path": {"type": "string", "required": True}},
    },
}


def execute(action, params):
    try:
        if action == "manifest_info":
            if not params.get("path"):
                return {"status": "error", "message": "Missing required param: path"}
            model, extra = load_manifest(params["path"])
            bb = model.backbone
            return {
                "status": "success",
                "num_classes": bb.num_classes,
                "feature_dim": bb.feature_dim,
                "input_shape": list(bb.input_shape),
                "tau": model.tau,
                "n_d": model.n_d,
                "selected_epoch": model.selected_epoch,
                "val_f1": model.val_f1,
                "low_separation": model.low_separation,
                "extra_keys": sorted(extra),
            }
        return {"status": "error", "message": f"Unknown action: {action}"}
    except (PufAuthError, ValueError, OSError) as e:
        return {"status": "error", "message": str(e)}


if __name__ == "__main__":
    if len(sys.argv) < 2:
        print(json.dumps({"status": "error", "message": "No action specified"}))
        sys.exit(1)
    params = {}
    for i, arg in enumerate(sys.argv):
        if arg == "--params" and i + 1 < len(sys.argv):
            params = json.loads(sys.argv[i + 1])
            break
    print(json.dumps(execute(sys.argv[1], params), indent=2))
