"""
The two stages of continual local replacement.

Training: the backbone is trained with cross-entropy on the union of the
training set and a locally replaced copy of it. Fine-tuning: with the backbone
frozen, a fresh classifier is tuned on the support set; before every epoch
after the first, the current classifier pseudo-labels the unlabeled images,
a same-pseudo-label donor is drawn for each support image and the support set
is re-synthesized by local replacement.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from data import Episode, ImageSample, LabeledDataset, grant_oracle_access
from errors import ConfigurationError, TrainingError, UsageError
from model import (BackboneConfig, Head, ModelState, embed, imprint, new_head, new_model,
                   predict_features)
from numerics import sgd_step, softmax_cross_entropy
from replacement import BlockAug, ReplacementMethod, apply_replacement, synthesize_training_image

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    VANILLA = "Vanilla"
    OTLR = "OTLR"
    CLR_NO_PL = "CLR_no_PL"
    CLR_GT = "CLR_GT"
    CAR = "CAR"
    CLR = "CLR"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        for variant in cls:
            if variant.value.lower() == str(name).strip().lower():
                return variant
        raise ConfigurationError(f"unknown variant '{name}', expected one of {[v.value for v in cls]}")


REPLACING_VARIANTS = frozenset({Variant.OTLR, Variant.CLR_NO_PL, Variant.CLR_GT, Variant.CLR})
FINETUNE_HEADS = ("linear", "cosine", "cosine-imprint")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    method: ReplacementMethod = BlockAug(max_blocks=4)
    regenerate_augmented_per_epoch: bool = False
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    progress: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError(f"training needs epochs >= 0 and batch >= 1, got {self.epochs}, {self.batch_size}")


@dataclass
class FinetuneConfig:
    variant: Variant = Variant.CLR
    epochs: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    dampening: float = 0.9
    weight_decay: float = 1e-3
    batch_size: Optional[int] = None  # None: the whole training set per step
    method: ReplacementMethod = BlockAug(max_blocks=6)
    head: str = "linear"
    scale: float = 10.0
    trace: bool = False
    capture: bool = False  # keep the features of every synthesized support set

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.head not in FINETUNE_HEADS:
            raise ConfigurationError(f"fine-tune head must be one of {FINETUNE_HEADS}, got '{self.head}'")
        if self.epochs < 1:
            raise ConfigurationError(f"fine-tuning needs at least one epoch, got {self.epochs}")
        if not 0.0 <= self.dampening <= 1.0:
            raise ConfigurationError(f"fine-tune dampening must lie in [0, 1], got {self.dampening}")


@dataclass
class PseudoLabeledPool:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise UsageError(f"pseudo labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class EpisodeFeatures:
    """Frozen-backbone features of an episode, computed once and shared by all variants"""
    support: np.ndarray
    query: np.ndarray
    unlabeled: np.ndarray


@dataclass
class SynthesizedSupport:
    images: np.ndarray
    masks: np.ndarray
    donors: List[Optional[int]]

    @property
    def changed(self) -> np.ndarray:
        return self.masks.reshape(len(self.masks), -1).any(axis=1)


@dataclass
class SynthesizedFeatures:
    """Frozen-backbone features of the support set synthesized before one epoch"""
    epoch: int
    features: np.ndarray
    source_ids: np.ndarray  # donor id per support image, -1 where nothing was replaced


@dataclass
class FinetuneResult:
    head: Head
    losses: List[float]
    variant: Variant
    trace: List[dict] = field(default_factory=list)
    synthesized: List[SynthesizedFeatures] = field(default_factory=list)


def _child_rngs(rng: np.random.Generator, count: int) -> List[np.random.Generator]:
    return [np.random.default_rng(int(seed)) for seed in rng.integers(0, 2 ** 63 - 1, size=count)]


# ---------------------------------------------------------------------------
# Training stage
# ---------------------------------------------------------------------------

def build_augmented_trainset(dataset: LabeledDataset, method: ReplacementMethod,
                             rng: np.random.Generator) -> LabeledDataset:
    """One locally replaced copy of every training image, keeping its label"""
    offset = int(dataset.ids.max()) + 1 if len(dataset) else 0
    samples = []
    for index, sample in enumerate(dataset.samples):
        outcome = synthesize_training_image(index, dataset, method, rng)
        samples.append(ImageSample(id=sample.id + offset, pixels=outcome.image, label=sample.label))
    return LabeledDataset(samples, dataset.classes, dataset.role, dataset.class_names)


def train_backbone(dataset: LabeledDataset, config: TrainConfig, rng: np.random.Generator) -> ModelState:
    """
    Minimize cross-entropy over the training set and its locally replaced copy.

    Mini-batches are drawn from the shuffled union so that original and
    synthesized images share batches. The training head (linear, one output
    per training class) is discarded afterwards.
    """
    if len(dataset.classes) < 2:
        raise UsageError(f"backbone training needs >= 2 classes, got {len(dataset.classes)}")
    init_rng, augment_rng, order_rng = _child_rngs(rng, 3)
    model = new_model(config.backbone, init_rng)
    class_index = {c: i for i, c in enumerate(sorted(dataset.classes))}
    targets = np.array([class_index[label] for label in dataset.labels], dtype=np.int64)
    head = new_head("linear", len(class_index), config.backbone.embedding_dim, init_rng)

    augmented = build_augmented_trainset(dataset, config.method, augment_rng)
    images = np.concatenate([dataset.images, augmented.images])
    union_targets = np.concatenate([targets, targets])
    logger.info("training backbone on %d images (%d original + %d synthesized), %d classes",
                len(images), len(dataset), len(augmented), len(class_index))

    history = []
    progress = tqdm(range(config.epochs), desc="train", disable=not config.progress)
    for epoch in progress:
        if epoch > 0 and config.regenerate_augmented_per_epoch:
            augmented = build_augmented_trainset(dataset, config.method, augment_rng)
            images = np.concatenate([dataset.images, augmented.images])
        order = order_rng.permutation(len(images))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            features, caches = model.backbone.forward(images[batch], model.theta)
            out, head_cache = head.forward(features)
            loss, dlogits = softmax_cross_entropy(out, union_targets[batch])
            if not np.isfinite(loss):
                last = batch_losses[-1] if batch_losses else model.initial_loss
                raise TrainingError(f"training diverged at epoch {epoch + 1}, batch {start // config.batch_size + 1}"
                                    f" (loss {loss}, last finite loss {last}); try a lower train.lr")
            if model.initial_loss is None:
                model.initial_loss = loss
            dfeatures = head.backward(dlogits, head_cache)
            model.backbone.backward(dfeatures, caches, model.theta, input_grad=False)
            sgd_step(model.theta, config.lr, config.momentum, config.weight_decay)
            sgd_step(head.params, config.lr, config.momentum, config.weight_decay)
            batch_losses.append(loss)
        epoch_loss = float(np.mean(batch_losses))
        history.append(epoch_loss)
        progress.set_postfix(loss=f"{epoch_loss:.4f}")
        logger.info("epoch %d/%d: loss %.4f", epoch + 1, config.epochs, epoch_loss)

    model.loss_history = history
    return model


# ---------------------------------------------------------------------------
# Fine-tune stage
# ---------------------------------------------------------------------------

def embed_episode(model: ModelState, episode: Episode) -> EpisodeFeatures:
    return EpisodeFeatures(support=embed(model, episode.support_images),
                           query=embed(model, episode.query_images),
                           unlabeled=embed(model, episode.unlabeled_images))


def pseudo_label(model: ModelState, head: Head, unlabeled: np.ndarray,
                 features: Optional[np.ndarray] = None) -> PseudoLabeledPool:
    """Argmax prediction of the current head for every unlabeled image"""
    if features is None:
        features = embed(model, unlabeled)
    if len(features) == 0:
        return PseudoLabeledPool(np.zeros(0, dtype=np.int64), head.num_classes)
    return PseudoLabeledPool(predict_features(head, features), head.num_classes)


def oracle_pool(episode: Episode, reason: str) -> PseudoLabeledPool:
    """The hidden true labels presented as a pool; every call is recorded in the oracle audit"""
    token = grant_oracle_access(reason)
    return PseudoLabeledPool(episode.unlabeled_labels(token), episode.spec.n)


def select_sources(support_labels: np.ndarray, pool: PseudoLabeledPool,
                   rng: np.random.Generator) -> List[Optional[int]]:
    """For each support image, a uniform donor among unlabeled images whose pool label matches"""
    donors = []
    for label in support_labels:
        matches = np.flatnonzero(pool.labels == label)
        donors.append(int(matches[rng.integers(len(matches))]) if len(matches) else None)
    return donors


def select_random_sources(num_support: int, num_unlabeled: int, rng: np.random.Generator) -> List[Optional[int]]:
    if num_unlabeled == 0:
        return [None] * num_support
    return [int(i) for i in rng.integers(0, num_unlabeled, size=num_support)]


def synthesize_support(support_images: np.ndarray, unlabeled_images: np.ndarray,
                       donors: Sequence[Optional[int]], method: ReplacementMethod,
                       rng: np.random.Generator, unlabeled_ids: Optional[np.ndarray] = None) -> SynthesizedSupport:
    """Locally replace each support image by its donor; donorless images pass through unchanged"""
    images = support_images.copy()
    masks = np.zeros((len(support_images),) + support_images.shape[2:], dtype=bool)
    for i, donor in enumerate(donors):
        if donor is None:
            continue
        source_id = int(unlabeled_ids[donor]) if unlabeled_ids is not None else donor
        outcome = apply_replacement(support_images[i], unlabeled_images[donor], method, rng, source_id=source_id)
        images[i] = outcome.image
        masks[i] = outcome.replaced_mask
    return SynthesizedSupport(images=images, masks=masks, donors=list(donors))


def _embed_synthesized(model: ModelState, synthesized: SynthesizedSupport, support_features: np.ndarray) -> np.ndarray:
    # unchanged images reuse their cached features
    features = support_features.copy()
    changed = synthesized.changed
    if changed.any():
        features[changed] = embed(model, synthesized.images[changed])
    return features


def _source_ids(synthesized: SynthesizedSupport, unlabeled_ids: np.ndarray) -> np.ndarray:
    return np.array([int(unlabeled_ids[donor]) if donor is not None and changed else -1
                     for donor, changed in zip(synthesized.donors, synthesized.changed)], dtype=np.int64)


def _optimize_epoch(head: Head, features: np.ndarray, labels: np.ndarray, config: FinetuneConfig,
                    rng: np.random.Generator) -> float:
    batch_size = config.batch_size or len(features)
    order = np.arange(len(features)) if batch_size >= len(features) else rng.permutation(len(features))
    losses = []
    for start in range(0, len(order), batch_size):
        batch = order[start:start + batch_size]
        out, cache = head.forward(features[batch])
        loss, dlogits = softmax_cross_entropy(out, labels[batch])
        if not np.isfinite(loss):
            raise TrainingError(f"fine-tuning diverged (loss {loss}); try a lower finetune.lr")
        head.backward(dlogits, cache)
        sgd_step(head.params, config.lr, config.momentum, config.weight_decay, config.dampening)
        losses.append(loss)
    return float(np.mean(losses))


def finetune(model: ModelState, episode: Episode, config: FinetuneConfig, rng: np.random.Generator,
             features: Optional[EpisodeFeatures] = None) -> FinetuneResult:
    """
    Tune a new classifier on the support set over the frozen backbone.

    Epoch 1 always uses the original support set. Later epochs depend on the variant:
    Vanilla keeps the original support; OTLR synthesizes once from the epoch-1
    pseudo labels; CLR_no_PL draws donors uniformly from all unlabeled images;
    CLR_GT selects donors by the hidden true labels; CAR adds the whole
    unlabeled images with their current pseudo labels; CLR pseudo-labels,
    selects and replaces before every epoch.
    """
    if not model.frozen:
        raise UsageError("fine-tuning needs a frozen backbone; call freeze_backbone first")
    if features is None:
        features = embed_episode(model, episode)
    init_rng, order_rng, replace_rng = _child_rngs(rng, 3)

    variant = config.variant
    if variant != Variant.VANILLA and len(episode.unlabeled_ids) == 0:
        logger.info("%s has no unlabeled images in this episode; running as Vanilla", variant.value)
        variant = Variant.VANILLA

    head = new_head(config.head, episode.spec.n, model.config.embedding_dim, init_rng, scale=config.scale)
    if config.head == "cosine-imprint":
        head = imprint(head, features.support, episode.support_labels)
    truth = None
    if config.trace and len(episode.unlabeled_ids):
        truth = episode.unlabeled_labels(grant_oracle_access("fine-tune trace diagnostics"))
    gt_pool = oracle_pool(episode, "CLR_GT donor selection") if variant == Variant.CLR_GT else None

    train_features = features.support
    train_labels = episode.support_labels
    losses, trace, captured = [], [], []
    for epoch in range(1, config.epochs + 1):
        if epoch > 1 and variant in REPLACING_VARIANTS and not (variant == Variant.OTLR and epoch > 2):
            if variant == Variant.CLR_NO_PL:
                donors = select_random_sources(len(train_labels), len(episode.unlabeled_ids), replace_rng)
            else:
                pool = gt_pool if gt_pool is not None else \
                    pseudo_label(model, head, episode.unlabeled_images, features.unlabeled)
                donors = select_sources(episode.support_labels, pool, replace_rng)
            synthesized = synthesize_support(episode.support_images, episode.unlabeled_images, donors,
                                             config.method, replace_rng, episode.unlabeled_ids)
            train_features = _embed_synthesized(model, synthesized, features.support)
            if config.capture:
                captured.append(SynthesizedFeatures(epoch, train_features,
                                                    _source_ids(synthesized, episode.unlabeled_ids)))
        elif epoch > 1 and variant == Variant.CAR:
            pool = pseudo_label(model, head, episode.unlabeled_images, features.unlabeled)
            train_features = np.concatenate([features.support, features.unlabeled])
            train_labels = np.concatenate([episode.support_labels, pool.labels])

        loss = _optimize_epoch(head, train_features, train_labels, config, order_rng)
        losses.append(loss)
        if config.trace:
            trace.append({
                "epoch": epoch,
                "loss": loss,
                "pseudo_label_accuracy": (float(np.mean(predict_features(head, features.unlabeled) == truth))
                                          if truth is not None else None),
                "query_accuracy": accuracy(head, features.query, episode.query_labels),
            })
    return FinetuneResult(head=head, losses=losses, variant=variant, trace=trace, synthesized=captured)


def accuracy(head: Head, features: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict_features(head, features) == labels))


def evaluate_episode(model: ModelState, head: Head, episode: Episode,
                     features: Optional[EpisodeFeatures] = None) -> float:
    """Fraction of the query set predicted correctly, in episode-local labels"""
    query = features.query if features is not None else embed(model, episode.query_images)
    return accuracy(head, query, episode.query_labels)
