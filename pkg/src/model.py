"""
Backbone f_theta, classifier heads C_w and weight imprinting.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from errors import ConfigurationError, LoadError, ReportError, UsageError
from numerics import (FLOAT, NORM_EPS, Conv2d, GlobalAvgPool, MaxPool2d, ParamSet, ReLU, Sequential,
                      l2_normalize, linear_backward, linear_forward, load_checkpoint, save_checkpoint)

logger = logging.getLogger(__name__)

DEFAULT_COSINE_SCALE = 10.0


@dataclass(frozen=True)
class BackboneConfig:
    """
    Conv blocks of [kxk conv -> ReLU -> optional 2x2 max-pool] followed by
    global average pooling. The default is the Conv-4 stack with d = 64.
    """
    in_channels: int = 3
    channels: Tuple[int, ...] = (64, 64, 64, 64)
    kernel: int = 3
    pool: Optional[Tuple[bool, ...]] = None
    image_side: int = 32

    def __post_init__(self):
        # normalized so configs read back from metadata compare equal
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.pool is None:
            object.__setattr__(self, "pool", (True,) * len(self.channels))
        object.__setattr__(self, "pool", tuple(bool(p) for p in self.pool))
        if not self.channels or min(self.channels) < 1 or self.in_channels < 1:
            raise ConfigurationError(f"backbone channels must be positive, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"backbone kernel must be odd and positive, got {self.kernel}")
        if len(self.pooling) != len(self.channels):
            raise ConfigurationError(f"pool plan {self.pool} must have one entry per conv block")
        if self.image_side // 2 ** sum(self.pooling) < 1:
            raise ConfigurationError(
                f"{sum(self.pooling)} pooling stages do not fit a {self.image_side}px image")

    @property
    def pooling(self) -> Tuple[bool, ...]:
        return self.pool

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]

    def to_metadata(self) -> Dict[str, str]:
        return {
            "in_channels": str(self.in_channels),
            "channels": ",".join(str(c) for c in self.channels),
            "kernel": str(self.kernel),
            "pool": ",".join("1" if p else "0" for p in self.pooling),
            "image_side": str(self.image_side),
        }

    @classmethod
    def from_metadata(cls, meta: Dict[str, str]) -> "BackboneConfig":
        try:
            return cls(in_channels=int(meta["in_channels"]),
                       channels=tuple(int(c) for c in meta["channels"].split(",")),
                       kernel=int(meta["kernel"]),
                       pool=tuple(p == "1" for p in meta["pool"].split(",")),
                       image_side=int(meta["image_side"]))
        except (KeyError, ValueError) as e:
            raise LoadError(f"incomplete backbone metadata: {e}") from e


def build_backbone(config: BackboneConfig) -> Sequential:
    layers = []
    previous = config.in_channels
    for i, (channels, pool) in enumerate(zip(config.channels, config.pooling), start=1):
        layers.append(Conv2d(f"conv{i}", previous, channels, config.kernel))
        layers.append(ReLU(f"relu{i}"))
        if pool:
            layers.append(MaxPool2d(f"pool{i}"))
        previous = channels
    layers.append(GlobalAvgPool("gap"))
    return Sequential(layers)


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

def _normalize_rows(v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return l2_normalize(v), norms


def _normalize_backward(d_hat: np.ndarray, hat: np.ndarray, norms: np.ndarray) -> np.ndarray:
    projected = (d_hat * hat).sum(axis=1, keepdims=True)
    grad = (d_hat - hat * projected) / np.where(norms > NORM_EPS, norms, 1)
    # rows at or below eps pass through l2_normalize unchanged
    return np.where(norms > NORM_EPS, grad, d_hat).astype(d_hat.dtype, copy=False)


class LinearHead:
    """logits = W f + b"""
    kind = "linear"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.params = ParamSet({"weight": weight, "bias": bias})
        if self.params["bias"].shape != (self.num_classes,):
            raise ConfigurationError(f"bias shape {bias.shape} does not match weight {weight.shape}")

    @property
    def num_classes(self) -> int:
        return self.params["weight"].shape[0]

    @property
    def dim(self) -> int:
        return self.params["weight"].shape[1]

    def forward(self, features: np.ndarray) -> Tuple[np.ndarray, tuple]:
        _check_dim(self, features)
        return linear_forward(features, self.params["weight"], self.params["bias"])

    def backward(self, dlogits: np.ndarray, cache: tuple) -> np.ndarray:
        dfeatures, dw, db = linear_backward(dlogits, cache)
        self.params.accumulate("weight", dw)
        self.params.accumulate("bias", db)
        return dfeatures


class CosineHead:
    """logits = scale * cos(f, W_r), computed on normalized features and rows"""
    kind = "cosine"

    def __init__(self, weight: np.ndarray, scale: float = DEFAULT_COSINE_SCALE):
        self.params = ParamSet({"weight": weight})
        self.scale = float(scale)

    @property
    def num_classes(self) -> int:
        return self.params["weight"].shape[0]

    @property
    def dim(self) -> int:
        return self.params["weight"].shape[1]

    def forward(self, features: np.ndarray) -> Tuple[np.ndarray, tuple]:
        _check_dim(self, features)
        f_hat, f_norms = _normalize_rows(features)
        w_hat, w_norms = _normalize_rows(self.params["weight"])
        logits = (self.scale * (f_hat @ w_hat.T)).astype(features.dtype, copy=False)
        return logits, (f_hat, f_norms, w_hat, w_norms)

    def backward(self, dlogits: np.ndarray, cache: tuple) -> np.ndarray:
        f_hat, f_norms, w_hat, w_norms = cache
        d_f_hat = self.scale * (dlogits @ w_hat)
        d_w_hat = self.scale * (dlogits.T @ f_hat)
        self.params.accumulate("weight", _normalize_backward(d_w_hat, w_hat, w_norms))
        return _normalize_backward(d_f_hat, f_hat, f_norms)


Head = Union[LinearHead, CosineHead]


def _check_dim(head: Head, features: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != head.dim:
        raise UsageError(f"{head.kind} head expects B x {head.dim} features, got {features.shape}")


def new_head(kind: str, num_classes: int, dim: int, rng: np.random.Generator,
             scale: float = DEFAULT_COSINE_SCALE) -> Head:
    """Weights ~ Uniform(-1/sqrt(d), 1/sqrt(d)); zero bias for the linear head"""
    if num_classes < 1 or dim < 1:
        raise UsageError(f"head needs K, d > 0, got K={num_classes} d={dim}")
    bound = 1.0 / np.sqrt(dim)
    weight = rng.uniform(-bound, bound, size=(num_classes, dim))
    kind = kind.lower()
    if kind == "linear":
        return LinearHead(weight, np.zeros(num_classes))
    if kind in ("cosine", "cosine-imprint"):
        return CosineHead(weight, scale)
    raise ConfigurationError(f"unknown head kind '{kind}', expected linear, cosine or cosine-imprint")


def imprint(head: CosineHead, support_features: np.ndarray, support_labels: np.ndarray) -> CosineHead:
    """Row c = l2_normalize(mean of l2-normalized support features of class c)"""
    if not isinstance(head, CosineHead):
        raise UsageError(f"imprinting needs a cosine head, got {head.kind}")
    labels = np.asarray(support_labels)
    normalized = l2_normalize(np.asarray(support_features, dtype=FLOAT))
    rows = []
    for c in range(head.num_classes):
        members = normalized[labels == c]
        if len(members) == 0:
            raise UsageError(f"cannot imprint class {c}: no support features")
        rows.append(l2_normalize(members.mean(axis=0)))
    return CosineHead(np.stack(rows), head.scale)


def logits(head: Head, features: np.ndarray) -> np.ndarray:
    return head.forward(features)[0]


def predict_features(head: Head, features: np.ndarray) -> np.ndarray:
    # argmax picks the lowest class index on ties
    return logits(head, features).argmax(axis=1)


# ---------------------------------------------------------------------------
# Model state
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    config: BackboneConfig
    backbone: Sequential
    theta: ParamSet
    head: Optional[Head] = None
    frozen: bool = False
    loss_history: List[float] = field(default_factory=list)
    initial_loss: Optional[float] = None


def new_model(config: BackboneConfig, rng: np.random.Generator) -> ModelState:
    backbone = build_backbone(config)
    return ModelState(config=config, backbone=backbone, theta=backbone.init_params(rng))


def embed(model: ModelState, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward images (B, C, H, W) through the backbone to (B, d) features"""
    images = np.asarray(images)
    min_side = 2 ** sum(model.config.pooling)
    if images.ndim != 4 or images.shape[1] != model.config.in_channels or min(images.shape[2:]) < min_side:
        raise UsageError(f"backbone expects B x {model.config.in_channels} x H x W images with H, W >= {min_side}, "
                         f"got {images.shape}")
    if len(images) == 0:
        return np.zeros((0, model.config.embedding_dim), dtype=FLOAT)
    chunks = []
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size].astype(FLOAT, copy=False)
        out, _ = model.backbone.forward(batch, model.theta, keep_cache=False)
        chunks.append(out)
    return np.concatenate(chunks)


def freeze_backbone(model: ModelState) -> ModelState:
    """Mark theta frozen; its arrays become read-only so any mutation raises"""
    for value in model.theta.params.values():
        value.setflags(write=False)
    model.frozen = True
    return model


def predict(model: ModelState, images: np.ndarray, head: Optional[Head] = None) -> np.ndarray:
    head = head or model.head
    if head is None:
        raise UsageError("predict needs a classifier head")
    return predict_features(head, embed(model, images))


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def save_model(model: ModelState, path) -> Path:
    """Write theta as a CLRCKPT1 checkpoint plus a key=value metadata sidecar"""
    path = Path(path)
    save_checkpoint(model.theta, path)
    meta = model.config.to_metadata()
    meta["head"] = model.head.kind if model.head is not None else "none"
    try:
        _meta_path(path).write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    except OSError as e:
        raise ReportError(f"could not write model metadata next to '{path}': {e}") from e
    return path


def load_model(path) -> ModelState:
    path = Path(path)
    try:
        lines = _meta_path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise LoadError(f"could not read model metadata for '{path}': {e}") from e
    meta = dict(line.split("=", 1) for line in lines if "=" in line)
    config = BackboneConfig.from_metadata(meta)
    backbone = build_backbone(config)
    theta = load_checkpoint(path)
    expected = set(backbone.init_params(np.random.default_rng(0)).params)
    if set(theta.params) != expected:
        raise LoadError(f"checkpoint '{path}' parameters do not match its metadata")
    return ModelState(config=config, backbone=backbone, theta=theta)
