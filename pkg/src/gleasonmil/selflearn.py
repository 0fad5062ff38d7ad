"""Teacher training, pseudo-labeling with label refinement, student
training, and the global-assignment baseline.

The teacher learns from bag labels only (one gradient step per slide); its
per-patch predictions are refined against the known slide labels into hard
pseudo-labels, on which the student trains as an ordinary supervised
classifier with class-balanced weighting. Refinement keeps a patch only
when its predicted grade is actually present in the slide label; NC labels
come exclusively from benign slides, and everything else is discarded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from gleasonmil.data import Slide
from gleasonmil.grading import GleasonGrade, SlideLabel
from gleasonmil.mil import (
    attention_backward,
    attention_forward_cache,
    max_aggregation_backward,
    teacher_bag_loss,
    teacher_bag_loss_grad,
)
from gleasonmil.model import (
    EncoderConfig,
    ModelParameters,
    init_parameters,
    network_backward,
    network_forward,
    probs_backward,
)
from gleasonmil.optim import make_optimizer

__all__ = [
    "TrainConfig",
    "PseudoLabelRecord",
    "learning_rate",
    "train_teacher",
    "predict_slides",
    "refine_labels",
    "class_weights",
    "student_loss",
    "train_student",
    "global_assignment_dataset",
    "train_on_patches",
    "write_pseudo_labels",
    "read_pseudo_labels",
    "write_loss_history",
]

_CANCEROUS = slice(1, 4)
_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    """Shared schedule for teacher, student and baseline training."""

    epochs: int = 30
    optimizer: str = "SGD"
    lr_init: float = 1e-2
    lr_drop_factor: float = 10.0
    decay_tail_epochs: int = 5
    max_patches_per_bag: int = 200
    batch_size: int = 32
    seed: int = 0
    attention_dim: int = 16
    attention_norm: str = "joint"
    decay_from_epoch_number: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_factor must be positive")
        if self.decay_tail_epochs < 0:
            raise ValueError("decay_tail_epochs must be >= 0")
        if self.max_patches_per_bag < 1:
            raise ValueError("max_patches_per_bag must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.attention_dim < 1:
            raise ValueError("attention_dim must be >= 1")
        if self.attention_norm not in ("joint", "per_class"):
            raise ValueError("attention_norm must be 'joint' or 'per_class'")


@dataclass
class PseudoLabelRecord:
    """Teacher probabilities for one patch plus its refined hard label.

    ``refined`` is a grade, or None for a discarded patch.
    """

    slide_id: str
    patch_id: str
    teacher_probs: np.ndarray
    refined: GleasonGrade | None

    @property
    def kept(self) -> bool:
        return self.refined is not None

    @property
    def refined_name(self) -> str:
        return "DISCARD" if self.refined is None else self.refined.name


def learning_rate(epoch: int, config: TrainConfig) -> float:
    """Step schedule: lr_init, dropped by lr_drop_factor after half the
    epochs, then an exponential tail (lr_init / drop) * exp(-0.1 t) over the
    last ``decay_tail_epochs`` epochs.

    The tail is clipped so the flat reduced-rate phase keeps at least one
    epoch; t is 1-based from the tail start (or the global epoch number
    when ``decay_from_epoch_number`` is set).
    """
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    drop_epoch = math.ceil(config.epochs / 2)
    tail_start = max(drop_epoch + 1, config.epochs - config.decay_tail_epochs)
    if epoch < drop_epoch:
        return config.lr_init
    dropped = config.lr_init / config.lr_drop_factor
    if epoch < tail_start:
        return dropped
    t = (epoch + 1) if config.decay_from_epoch_number else (epoch - tail_start + 1)
    return dropped * math.exp(-0.1 * t)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train_teacher(slides: Sequence[Slide], config: TrainConfig,
                  encoder_config: EncoderConfig | None = None,
                  agg: str = "max") -> tuple[ModelParameters, list[float]]:
    """Train the bag-supervised teacher; one gradient step per slide per
    epoch, with slides shuffled and instances subsampled (without
    replacement, at most ``max_patches_per_bag``) from per-epoch streams
    reseeded from ``config.seed``. Returns the model and the per-step loss
    history (epochs x n_slides entries)."""
    if agg not in ("max", "attention"):
        raise ValueError(f"agg must be 'max' or 'attention', got {agg!r}")
    slides = list(slides)
    if not slides:
        raise ValueError("empty dataset")
    if not any(s.label.is_benign for s in slides) or all(s.label.is_benign for s in slides):
        raise ValueError("training set needs at least one benign and one cancerous slide")
    for slide in slides:
        if slide.n_instances < 1:
            raise ValueError(f"slide {slide.slide_id} has no patches")

    encoder_config = encoder_config or EncoderConfig()
    model = init_parameters(encoder_config, config.seed,
                            attention_dim=config.attention_dim if agg == "attention" else None)
    optimizer = make_optimizer(config.optimizer)
    losses: list[float] = []

    for epoch in range(config.epochs):
        lr = learning_rate(epoch, config)
        rng = _epoch_rng(config.seed, epoch)
        order = rng.permutation(len(slides))
        for slide_index in order:
            slide = slides[slide_index]
            n = slide.n_instances
            take = min(n, config.max_patches_per_bag)
            subset = rng.choice(n, size=take, replace=False) if take < n else np.arange(n)
            pixels = slide.pixels[subset]

            z, probs, cache = network_forward(pixels, model)
            if agg == "max":
                bag = probs[:, _CANCEROUS].max(axis=0)
                dbag = teacher_bag_loss_grad(bag, slide.label)
                dprobs = max_aggregation_backward(dbag, probs)
                dz_extra, attn_grads = None, {}
            else:
                weights, attn_cache = attention_forward_cache(z, model.attention,
                                                              config.attention_norm)
                bag = (weights[:, _CANCEROUS] * probs[:, _CANCEROUS]).sum(axis=0)
                dbag = teacher_bag_loss_grad(bag, slide.label)
                dprobs, dz_extra, attn_grads = attention_backward(
                    dbag, probs, attn_cache, model.attention)

            loss = teacher_bag_loss(bag, slide.label)
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite teacher loss at epoch {epoch}, slide {slide.slide_id}: {loss}")
            losses.append(loss)

            dlogits = probs_backward(dprobs, cache, model)
            _, grads = network_backward(dlogits, dz_extra, cache, model)
            grads.update(attn_grads)
            optimizer.step(model.params, grads, lr)

    model.check_finite()
    return model, losses


def predict_slides(slides: Sequence[Slide], model: ModelParameters,
                   batch_size: int = 256):
    """Per-patch probabilities for every slide: yields
    (slide_id, patch_id, probs) in slide order."""
    for slide in slides:
        for start in range(0, slide.n_instances, batch_size):
            chunk = slide.pixels[start:start + batch_size]
            _, probs, _ = network_forward(chunk, model)
            for offset in range(chunk.shape[0]):
                yield slide.slide_id, slide.patch_ids[start + offset], probs[offset]


def refine_labels(predictions: Iterable[tuple[str, str, np.ndarray]],
                  labels: Mapping[str, SlideLabel]) -> list[PseudoLabelRecord]:
    """Turn teacher predictions into hard pseudo-labels.

    Benign slides contribute every patch as NC. On cancerous slides a patch
    keeps its predicted grade only when that grade is present in the slide
    label; NC predictions (false negatives of a positive bag) and absent
    grades are discarded.
    """
    records: list[PseudoLabelRecord] = []
    for slide_id, patch_id, probs in predictions:
        if slide_id not in labels:
            raise KeyError(f"no slide label for {slide_id!r}")
        label = labels[slide_id]
        probs = np.asarray(probs, dtype=np.float64)
        if label.is_benign:
            refined: GleasonGrade | None = GleasonGrade.NC
        else:
            predicted = GleasonGrade(int(np.argmax(probs)))
            if predicted is not GleasonGrade.NC and label.contains(predicted):
                refined = predicted
            else:
                refined = None
        records.append(PseudoLabelRecord(slide_id, patch_id, probs, refined))
    return records


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights w_c = (C * N) / N_c over the four classes.

    Classes absent from the refined set get weight 0 and drop out of the
    loss instead of raising a division error.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (4,) or counts.min() < 0:
        raise ValueError("counts must be 4 nonnegative values")
    total = counts.sum()
    if total <= 0:
        raise ValueError("no kept patches")
    return np.divide(4.0 * total, counts, out=np.zeros(4), where=counts > 0)


def student_loss(pred, refined: GleasonGrade, weights: np.ndarray) -> float:
    """Weighted cross entropy for a one-hot pseudo-label:
    -(1/C) * w_c * log p_c."""
    probs = np.asarray(pred.probs if hasattr(pred, "probs") else pred, dtype=np.float64)
    if refined is None:
        raise ValueError("student loss undefined for discarded patches")
    p = max(float(probs[refined.value]), _EPS)
    return -weights[refined.value] * math.log(p) / 4.0


def train_on_patches(pixels: np.ndarray, targets: np.ndarray, config: TrainConfig,
                     encoder_config: EncoderConfig | None = None,
                     weights: np.ndarray | None = None) -> tuple[ModelParameters, list[float]]:
    """Mini-batch supervised training on hard patch labels with the shared
    epoch/learning-rate schedule; the workhorse behind the student and the
    global-assignment baseline. Returns (model, per-batch loss history)."""
    targets = np.asarray(targets, dtype=np.int64)
    if pixels.shape[0] != targets.shape[0] or pixels.shape[0] == 0:
        raise ValueError("pixels and targets must be equal-length and nonempty")
    if weights is None:
        counts = np.bincount(targets, minlength=4)
        weights = class_weights(counts)
    encoder_config = encoder_config or EncoderConfig()
    model = init_parameters(encoder_config, config.seed)
    optimizer = make_optimizer(config.optimizer)
    losses: list[float] = []
    n = pixels.shape[0]

    for epoch in range(config.epochs):
        lr = learning_rate(epoch, config)
        rng = _epoch_rng(config.seed, epoch)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            x = pixels[batch]
            y = targets[batch]
            _, probs, cache = network_forward(x, model)
            w = weights[y]
            p = np.maximum(probs[np.arange(len(y)), y], _EPS)
            loss = float((-w * np.log(p) / 4.0).mean())
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            losses.append(loss)
            # d/dlogits of mean weighted CE: (w/C) * (p - onehot) / B
            dlogits = probs.copy()
            dlogits[np.arange(len(y)), y] -= 1.0
            dlogits *= (w / 4.0 / len(y))[:, None]
            _, grads = network_backward(dlogits, None, cache, model)
            optimizer.step(model.params, grads, lr)

    model.check_finite()
    return model, losses


def train_student(refined: Sequence[PseudoLabelRecord],
                  patches: Mapping[tuple[str, str], np.ndarray],
                  config: TrainConfig,
                  encoder_config: EncoderConfig | None = None) -> tuple[ModelParameters, list[float]]:
    """Supervised training on the kept pseudo-labels with class weighting."""
    kept = [r for r in refined if r.kept]
    if not kept:
        raise ValueError("empty refined set")
    classes = {r.refined.value for r in kept}
    if len(classes) < 2:
        raise ValueError("degenerate pseudo-dataset: refined set has a single class")
    try:
        pixels = np.stack([patches[(r.slide_id, r.patch_id)] for r in kept])
    except KeyError as exc:
        raise KeyError(f"no patch pixels for pseudo-label record {exc}") from exc
    targets = np.asarray([r.refined.value for r in kept], dtype=np.int64)
    return train_on_patches(pixels, targets, config, encoder_config)


def global_assignment_dataset(slides: Sequence[Slide]):
    """Patch-level dataset labeled with the slide's global grade.

    Benign slides contribute all patches as NC; single-grade cancerous
    slides contribute all patches as that grade; mixed-grade slides are
    skipped entirely. Returns (slide_id, patch_id, pixels, grade) tuples.
    """
    dataset = []
    for slide in slides:
        if slide.label.is_benign:
            grade = GleasonGrade.NC
        elif slide.score.primary == slide.score.secondary:
            grade = GleasonGrade.from_pattern(slide.score.primary)
        else:
            continue
        for i, patch_id in enumerate(slide.patch_ids):
            dataset.append((slide.slide_id, patch_id, slide.pixels[i], grade))
    return dataset


# ---------------------------------------------------------------------------
# persistence

PSEUDO_FIELDS = ("slide_id", "patch_id", "p_nc", "p_gg3", "p_gg4", "p_gg5", "refined")


def write_pseudo_labels(records: Sequence[PseudoLabelRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(PSEUDO_FIELDS)
        for r in records:
            writer.writerow([r.slide_id, r.patch_id,
                             *(repr(float(p)) for p in r.teacher_probs),
                             r.refined_name])


def read_pseudo_labels(path: str | Path) -> list[PseudoLabelRecord]:
    records: list[PseudoLabelRecord] = []
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or tuple(reader.fieldnames) != PSEUDO_FIELDS:
            raise ValueError(f"pseudo-label file {path}: header must be {','.join(PSEUDO_FIELDS)}")
        for i, row in enumerate(reader, start=2):
            name = row["refined"].strip()
            if name == "DISCARD":
                refined = None
            else:
                try:
                    refined = GleasonGrade[name]
                except KeyError:
                    raise ValueError(f"pseudo-label file {path} row {i}: "
                                     f"bad refined label {name!r}") from None
            probs = np.array([float(row[f]) for f in PSEUDO_FIELDS[2:6]])
            records.append(PseudoLabelRecord(row["slide_id"], row["patch_id"], probs, refined))
    return records


def write_loss_history(path: str | Path, losses: Sequence[float],
                       config: TrainConfig) -> None:
    """Per-epoch mean loss and learning rate as CSV."""
    steps_per_epoch = len(losses) // config.epochs
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "mean_loss", "lr"])
        for epoch in range(config.epochs):
            chunk = losses[epoch * steps_per_epoch:(epoch + 1) * steps_per_epoch]
            mean = float(np.mean(chunk)) if chunk else float("nan")
            writer.writerow([epoch, repr(mean), repr(learning_rate(epoch, config))])
