"""Cough-specific CNN, gender conditioning and gender-specific routing."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import ContextualAttention, feature_map_to_positions
from .nn import BatchNorm2d, Conv2d, Linear, Module, Tensor, no_grad
from .nn import functional as F
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

GENDER_MODES = ("baseline", "gender_based", "gender_specific")
GENDERS = ("female", "male")
POSITIVE = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = "cough_cnn"
    attention: bool = False
    attention_mode: str = "scale"
    gender_mode: str = "baseline"
    in_channels: int = 3
    conv_channels: tuple[int, int] = (32, 64)
    fc_hidden: int = 128
    classes: int = 2
    pool_out: tuple[int, int] = (2, 2)

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.pool_out = tuple(self.pool_out)

    def validate(self) -> None:
        if self.arch != "cough_cnn":
            raise ConfigError(f"unsupported arch {self.arch!r}")
        if self.gender_mode not in GENDER_MODES:
            raise ConfigError(f"gender_mode must be one of {GENDER_MODES}, got {self.gender_mode!r}")
        if self.attention_mode not in ("scale", "sum"):
            raise ConfigError(f"attention_mode must be 'scale' or 'sum', got {self.attention_mode!r}")
        if len(self.conv_channels) != 2 or min(self.conv_channels) < 1:
            raise ConfigError(f"conv_channels must be two positive ints, got {self.conv_channels}")
        if self.fc_hidden < 1 or self.classes < 2 or self.in_channels < 1:
            raise ConfigError("fc_hidden, classes and in_channels must be positive (classes >= 2)")

    @property
    def uses_gender_input(self) -> bool:
        return self.gender_mode == "gender_based"

    @property
    def fc_input_dim(self) -> int:
        c = self.conv_channels[1]
        positions = self.pool_out[0] * self.pool_out[1]
        dim = c if (self.attention and self.attention_mode == "sum") else c * positions
        return dim + (len(GENDERS) if self.uses_gender_input else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["pool_out"] = list(self.pool_out)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def gender_code(gender: str) -> np.ndarray:
    """One-hot gender vector: female = [1, 0], male = [0, 1]."""
    if gender not in GENDERS:
        raise ValueError(f"unknown gender {gender!r}")
    code = np.zeros(len(GENDERS), dtype=np.float32)
    code[GENDERS.index(gender)] = 1.0
    return code


class CoughCNN(Module):
    """Two conv blocks, optional contextual attention, two-layer FC head.

    ``forward`` returns logits; the softmax lives in the loss (training) and
    in :meth:`predict_proba` (inference). When attention is enabled the most
    recent attention weights are kept in ``last_alpha`` (``[N, 4]``).
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c1, c2 = config.conv_channels
        self.conv1 = Conv2d(config.in_channels, c1, rng)
        self.bn1 = BatchNorm2d(c1)
        self.conv2 = Conv2d(c1, c2, rng)
        self.bn2 = BatchNorm2d(c2)
        if config.attention:
            self.attn = ContextualAttention(c2, rng, mode=config.attention_mode)
        self.fc1 = Linear(config.fc_input_dim, config.fc_hidden, rng)
        self.fc2 = Linear(config.fc_hidden, config.classes, rng)
        self.last_alpha: np.ndarray | None = None

    def features(self, x: Tensor) -> Tensor:
        """Convolutional feature map ``[N, C2, 2, 2]``."""
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.max_pool2(x)
        x = F.relu(self.bn2(self.conv2(x)))
        return F.adaptive_avg_pool2d(x, self.config.pool_out)

    def forward(self, x, gender=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        fmap = self.features(x)
        if self.config.attention:
            h_tilde, alpha = self.attn(feature_map_to_positions(fmap))
            self.last_alpha = alpha.data
            flat = F.flatten(h_tilde)
        else:
            flat = F.flatten(fmap)
        if self.config.uses_gender_input:
            if gender is None:
                raise ValueError("gender_based model needs a gender code for every input")
            g = np.asarray(gender, dtype=flat.dtype).reshape(flat.shape[0], len(GENDERS))
            flat = F.concat([flat, Tensor(g)], axis=1)
        hidden = F.relu(self.fc1(flat))
        return self.fc2(hidden)

    def predict_proba(self, images: np.ndarray, genders=None) -> np.ndarray:
        """Positive-class probability for a float batch ``[N, 3, H, W]`` in eval mode."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                logits = self.forward(Tensor(images), genders)
                probs = F.softmax(logits, axis=1).data
        finally:
            self.train(was_training)
        return probs[:, POSITIVE].astype(np.float64)


def build_model(config: ModelConfig, rng: np.random.Generator | int | None = None) -> CoughCNN:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return CoughCNN(config, rng)


def image_to_input(image: np.ndarray) -> np.ndarray:
    """uint8 ``[H, W, 3]`` (or a batch ``[N, H, W, 3]``) -> float32 NCHW in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32) / np.float32(255.0)


def predict_patch(model: CoughCNN, patch, gender: str | None = None) -> float:
    """Probability that one patch comes from a positive recording."""
    image = getattr(patch, "image", patch)
    mode = model.config.gender_mode
    codes = None
    if mode == "gender_based":
        if gender is None:
            raise ValueError("gender_based model requires the recording's gender")
        codes = gender_code(gender)[None]
    return float(model.predict_proba(image_to_input(image), codes)[0])


def route_gender_specific(models: dict[str, CoughCNN], record) -> CoughCNN:
    gender = getattr(record, "gender", record)
    if gender not in models:
        raise KeyError(f"no gender-specific model for {gender!r}")
    return models[gender]


def check_gender_coverage(genders_in_data, available) -> None:
    """Fail early when data contains a gender that no model will be trained for."""
    missing = sorted(set(genders_in_data) - set(available))
    if missing:
        raise ConfigError(f"gender-specific mode: no training data/model for {missing}")


def save_model(path, model: CoughCNN, extra: dict | None = None) -> None:
    config = {"model": model.config.to_dict()}
    if extra:
        config.update(extra)
    save_checkpoint(path, model.state_dict(), config)


def load_model(path) -> tuple[CoughCNN, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, full_config_block)``."""
    config, state = load_checkpoint(path)
    if "model" not in config:
        raise CheckpointError(f"{path}: checkpoint carries no model config")
    model = build_model(ModelConfig.from_dict(config["model"]), 0)
    model.load_state_dict(state)
    model.eval()
    return model, config
