"""Cross-modal realness regressor.

An image backbone (2048-D pooled features) and a text encoder (768-D [CLS]
features) feed a concatenated 2816-D vector into a 529-unit fully connected
layer and a scalar output. ``resnet50`` / ``bert-base-uncased`` are the
full-size encoders; ``tiny`` encoders with the same output widths exist for
CPU smoke runs and tests.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import RealnessRecord
from .errors import ConfigurationError, InvalidInputError, TrainingAborted

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class AblationMode(str, enum.Enum):
    JOINT = "joint"
    IMAGE_ONLY = "image_only"
    TEXT_ONLY = "text_only"

    @classmethod
    def parse(cls, value) -> "AblationMode":
        try:
            return cls(value.value if isinstance(value, cls) else value)
        except ValueError:
            raise InvalidInputError(f"unknown ablation mode {value!r}; expected one of "
                                    f"{[m.value for m in cls]}") from None


ABLATION_LABELS = {
    AblationMode.IMAGE_ONLY: "Image only (empty description)",
    AblationMode.TEXT_ONLY: "Text only (empty image)",
    AblationMode.JOINT: "Image + Text",
}


@dataclass
class FusionRegressorConfig:
    image_feature_dim: int = 2048
    text_feature_dim: int = 768
    hidden_units: int = 529
    head_activation: str = "relu"
    output_dim: int = 1
    finetune_encoders: bool = True
    image_encoder: str = "resnet50"
    text_encoder: str = "bert-base-uncased"
    image_size: int = 224
    max_text_length: int = 128
    image_weights: str | None = None  # local state_dict path; torchvision download otherwise

    def __post_init__(self):
        if min(self.image_feature_dim, self.text_feature_dim, self.hidden_units, self.output_dim) <= 0:
            raise ConfigurationError("feature dims, hidden_units and output_dim must be positive")
        if self.output_dim != 1:
            raise ConfigurationError("realness regression needs output_dim == 1")
        if self.head_activation not in ACTIVATIONS:
            raise ConfigurationError(f"head_activation must be one of {sorted(ACTIVATIONS)}")

    @property
    def concat_dim(self) -> int:
        return self.image_feature_dim + self.text_feature_dim

    @classmethod
    def smoke(cls, **overrides) -> "FusionRegressorConfig":
        """Tiny frozen encoders, full-width head; runs in seconds on CPU."""
        base = dict(image_encoder="tiny", text_encoder="tiny", image_size=32, finetune_encoders=False)
        base.update(overrides)
        return cls(**base)


ACTIVATIONS = {"relu": nn.ReLU, "gelu": nn.GELU, "tanh": nn.Tanh, "identity": nn.Identity}


@dataclass
class AugmentationPolicy:
    hflip: bool = True
    random_resized_crop: bool = True
    crop_scale: tuple[float, float] = (0.8, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)

    @property
    def enabled(self) -> bool:
        return self.hflip or self.random_resized_crop


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    loss: str = "mse"
    epochs: int = 20
    batch_size: int = 16
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0
    normalize_mos: bool = False

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationPolicy(**self.augmentation)
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.optimizer != "adamw":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss != "mse":
            raise ConfigurationError(f"unsupported loss {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_srocc: list[float] = field(default_factory=list)
    val_plcc: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    initial_train_mse: float | None = None
    best_epoch: int | None = None

    def __len__(self):
        return len(self.train_loss)

    def losses(self) -> dict:
        """Timing-free view, comparable across runs."""
        d = asdict(self)
        d.pop("epoch_seconds")
        return d


# encoders ----------------------------------------------------------------


class TinyImageEncoder(nn.Module):
    def __init__(self, out_dim: int = 2048):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(4), nn.Flatten(),
        )
        self.proj = nn.Linear(32 * 16, out_dim)
        self.out_dim = out_dim

    def forward(self, images):
        return self.proj(self.features(images))


class TinyTextEncoder(nn.Module):
    """Hashed bag-of-words encoder; an empty string yields the zero bag."""

    def __init__(self, out_dim: int = 768, buckets: int = 4096, width: int = 64):
        super().__init__()
        self.buckets = buckets
        self.bag = nn.EmbeddingBag(buckets, width, mode="mean")
        self.proj = nn.Linear(width, out_dim)
        self.out_dim = out_dim

    def _token_ids(self, text):
        words = "".join(c.lower() if c.isalnum() else " " for c in text).split()
        return [int.from_bytes(hashlib.blake2b(w.encode(), digest_size=4).digest(), "little") % self.buckets
                for w in words]

    def forward(self, texts):
        ids, offsets = [], []
        for t in texts:
            offsets.append(len(ids))
            ids.extend(self._token_ids(t))
        device = self.proj.weight.device
        bags = self.bag(torch.tensor(ids, dtype=torch.long, device=device),
                        torch.tensor(offsets, dtype=torch.long, device=device))
        return self.proj(bags)


class ResNet50Encoder(nn.Module):
    def __init__(self, weights_path: str | None = None, pretrained: bool = True):
        super().__init__()
        from torchvision.models import ResNet50_Weights, resnet50

        try:
            if weights_path:
                net = resnet50()
                net.load_state_dict(torch.load(weights_path, map_location="cpu"))
            else:
                net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V2 if pretrained else None)
        except Exception as exc:
            raise ConfigurationError("ResNet-50 ImageNet weights unavailable; pass image_weights "
                                     "or make the torchvision download reachable") from exc
        net.fc = nn.Identity()
        self.net = net
        self.out_dim = 2048

    def forward(self, images):
        return self.net(images)


class BertEncoder(nn.Module):
    def __init__(self, name: str = "bert-base-uncased", max_length: int = 128, pretrained: bool = True):
        super().__init__()
        from transformers import AutoModel, AutoTokenizer, BertConfig, BertModel

        try:
            self.tokenizer = AutoTokenizer.from_pretrained(name)
            self.model = AutoModel.from_pretrained(name) if pretrained else BertModel(BertConfig())
        except Exception as exc:
            raise ConfigurationError(f"BERT weights/tokenizer {name!r} unavailable") from exc
        self.max_length = max_length
        self.out_dim = self.model.config.hidden_size

    def forward(self, texts):
        tok = self.tokenizer(list(texts), padding=True, truncation=True,
                             max_length=self.max_length, return_tensors="pt")
        device = next(self.model.parameters()).device
        out = self.model(**{k: v.to(device) for k, v in tok.items()})
        return out.last_hidden_state[:, 0]


def _build_image_encoder(cfg: FusionRegressorConfig, pretrained: bool) -> nn.Module:
    if cfg.image_encoder == "tiny":
        return TinyImageEncoder(cfg.image_feature_dim)
    if cfg.image_encoder == "resnet50":
        return ResNet50Encoder(cfg.image_weights, pretrained=pretrained)
    raise ConfigurationError(f"unknown image encoder {cfg.image_encoder!r}")


def _build_text_encoder(cfg: FusionRegressorConfig, pretrained: bool) -> nn.Module:
    if cfg.text_encoder == "tiny":
        return TinyTextEncoder(cfg.text_feature_dim)
    return BertEncoder(cfg.text_encoder, cfg.max_text_length, pretrained=pretrained)


# model -------------------------------------------------------------------


class FusionRegressor(nn.Module):
    def __init__(self, config: FusionRegressorConfig, image_encoder: nn.Module, text_encoder: nn.Module):
        super().__init__()
        self.config = config
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        self.head = nn.Sequential(
            nn.Linear(config.concat_dim, config.hidden_units),
            ACTIVATIONS[config.head_activation](),
            nn.Linear(config.hidden_units, config.output_dim),
        )
        # native-scale prediction = head output * target_scale + target_shift
        self.register_buffer("target_shift", torch.zeros((), dtype=torch.float64))
        self.register_buffer("target_scale", torch.ones((), dtype=torch.float64))
        if not config.finetune_encoders:
            for p in list(image_encoder.parameters()) + list(text_encoder.parameters()):
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if not self.config.finetune_encoders:
            self.image_encoder.eval()
            self.text_encoder.eval()
        return self

    def features(self, images: torch.Tensor, texts: Sequence[str]) -> torch.Tensor:
        img = self.image_encoder(images)
        txt = self.text_encoder(list(texts))
        if img.shape[-1] != self.config.image_feature_dim or txt.shape[-1] != self.config.text_feature_dim:
            raise ConfigurationError(f"encoder widths {img.shape[-1]}/{txt.shape[-1]} do not match config")
        return torch.cat([img, txt], dim=1)

    def forward(self, images: torch.Tensor, texts: Sequence[str]) -> torch.Tensor:
        return self.head(self.features(images, texts)).squeeze(-1)


def build_model(config: FusionRegressorConfig | None = None, seed: int = 0,
                pretrained: bool = True) -> FusionRegressor:
    """Assemble encoders and a randomly initialized fusion head.

    ``seed`` fixes the head init (and the tiny encoders' random weights).
    ``pretrained=False`` builds the full-size architectures without weights,
    which is what checkpoint loading wants.
    """
    config = config or FusionRegressorConfig()
    torch.manual_seed(seed)
    image_encoder = _build_image_encoder(config, pretrained)
    text_encoder = _build_text_encoder(config, pretrained)
    torch.manual_seed(seed + 1)
    return FusionRegressor(config, image_encoder, text_encoder)


# inputs ------------------------------------------------------------------


class ImageStore:
    """Loads record images as normalized ``(3, S, S)`` tensors and caches them by path."""

    def __init__(self, image_size: int, base_dir: Path | None = None):
        self.image_size = image_size
        self.base_dir = Path(base_dir) if base_dir is not None else None
        self._cache: dict[str, torch.Tensor] = {}
        self._mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
        self._std = torch.tensor(IMAGENET_STD).view(3, 1, 1)

    def load(self, record: RealnessRecord) -> torch.Tensor:
        from PIL import Image

        path = record.resolve(self.base_dir)
        key = str(path)
        if key not in self._cache:
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB").resize((self.image_size, self.image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except OSError as exc:
                raise InvalidInputError(f"cannot read image {path}") from exc
            t = torch.from_numpy(arr).permute(2, 0, 1)
            self._cache[key] = (t - self._mean) / self._std
        return self._cache[key]

    def zeros(self) -> torch.Tensor:
        return torch.zeros(3, self.image_size, self.image_size)


def prepare_inputs(record: RealnessRecord, mode, store: ImageStore) -> tuple[torch.Tensor, str]:
    """Apply the ablation mask: image_only drops the text, text_only zeros the image."""
    mode = AblationMode.parse(mode)
    if not isinstance(record, RealnessRecord):
        raise InvalidInputError(f"expected a RealnessRecord, got {type(record).__name__}")
    if mode is AblationMode.TEXT_ONLY:
        return store.zeros(), record.description
    image = store.load(record)
    if mode is AblationMode.IMAGE_ONLY:
        return image, ""
    return image, record.description


def _augment(images: torch.Tensor, policy: AugmentationPolicy, gen: torch.Generator) -> torch.Tensor:
    from torchvision.transforms import functional as TF

    out = []
    size = images.shape[-1]
    for img in images:
        if policy.random_resized_crop:
            i, j, h, w = _crop_params(size, policy, gen)
            img = TF.resized_crop(img, i, j, h, w, [size, size], antialias=True)
        if policy.hflip and torch.rand((), generator=gen) < 0.5:
            img = img.flip(-1)
        out.append(img)
    return torch.stack(out)


def _crop_params(size, policy, gen):
    area = size * size
    log_ratio = (math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1]))
    for _ in range(10):
        target = area * (policy.crop_scale[0] + (policy.crop_scale[1] - policy.crop_scale[0])
                         * torch.rand((), generator=gen).item())
        ratio = math.exp(log_ratio[0] + (log_ratio[1] - log_ratio[0]) * torch.rand((), generator=gen).item())
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= size and 0 < h <= size:
            i = int(torch.randint(0, size - h + 1, (), generator=gen))
            j = int(torch.randint(0, size - w + 1, (), generator=gen))
            return i, j, h, w
    return 0, 0, size, size


def _batch(records, mode, store):
    pairs = [prepare_inputs(r, mode, store) for r in records]
    return torch.stack([p[0] for p in pairs]), [p[1] for p in pairs]


# inference ---------------------------------------------------------------


def _store_for(model, store, base_dir):
    return store if store is not None else ImageStore(model.config.image_size, base_dir)


@torch.no_grad()
def predict_batch(model: FusionRegressor, records: Sequence[RealnessRecord], mode="joint",
                  batch_size: int = 16, store: ImageStore | None = None, base_dir=None) -> list[float]:
    """Native-scale predictions in input order."""
    store = _store_for(model, store, base_dir)
    was_training = model.training
    model.eval()
    preds = []
    try:
        for start in range(0, len(records), batch_size):
            images, texts = _batch(records[start:start + batch_size], mode, store)
            out = model(images, texts).double() * model.target_scale + model.target_shift
            preds.extend(out.tolist())
    finally:
        model.train(was_training)
    return preds


def predict(model: FusionRegressor, record: RealnessRecord, mode="joint",
            store: ImageStore | None = None, base_dir=None) -> float:
    return predict_batch(model, [record], mode, store=store, base_dir=base_dir)[0]


def mse(model, records, mode="joint", store=None, base_dir=None) -> float:
    """Mean squared error on the training target scale."""
    preds = np.asarray(predict_batch(model, records, mode, store=store, base_dir=base_dir))
    scale = float(model.target_scale)
    shift = float(model.target_shift)
    targets = (np.asarray([r.mos for r in records]) - shift) / scale
    return float(np.mean(((preds - shift) / scale - targets) ** 2))


# training ----------------------------------------------------------------


def train(model: FusionRegressor, train_records: Sequence[RealnessRecord],
          val_records: Sequence[RealnessRecord] = (), config: TrainConfig | None = None,
          mode="joint", base_dir=None, log_path=None) -> tuple[FusionRegressor, TrainHistory]:
    """Fit with AdamW on MSE; keeps the best-validation-SROCC weights.

    With no validation records the final epoch's weights are returned.
    ``log_path`` receives one JSON line per epoch.
    """
    from .metrics import plcc, srocc

    config = config or TrainConfig()
    mode = AblationMode.parse(mode)
    train_records, val_records = list(train_records), list(val_records)
    if not train_records:
        raise InvalidInputError("empty training split")
    for r in train_records + val_records:
        if not math.isfinite(r.mos):
            raise InvalidInputError(f"record {r.id} has no finite MOS")

    store = ImageStore(model.config.image_size, base_dir)
    if config.normalize_mos:
        mos = np.array([r.mos for r in train_records])
        lo, hi = float(mos.min()), float(mos.max())
        model.target_shift.fill_(lo)
        model.target_scale.fill_(hi - lo if hi > lo else 1.0)
    shift, scale = float(model.target_shift), float(model.target_scale)

    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)

    history = TrainHistory(initial_train_mse=mse(model, train_records, mode, store))
    best_srocc, best_state = -math.inf, None
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            model.train()
            order = rng.permutation(len(train_records))
            total, seen = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                batch = [train_records[i] for i in order[start:start + config.batch_size]]
                images, texts = _batch(batch, mode, store)
                if config.augmentation.enabled and mode is not AblationMode.TEXT_ONLY:
                    images = _augment(images, config.augmentation, gen)
                target = torch.tensor([(r.mos - shift) / scale for r in batch], dtype=torch.float32)
                loss = F.mse_loss(model(images, texts), target)
                if not torch.isfinite(loss):
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch}, batch starting {start} "
                        f"(ids {[r.id for r in batch][:4]}...)", history)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(batch)
                seen += len(batch)
            history.train_loss.append(total / seen)

            if val_records:
                preds = np.asarray(predict_batch(model, val_records, mode, store=store))
                mos = np.asarray([r.mos for r in val_records])
                history.val_loss.append(float(np.mean(((preds - mos) / scale) ** 2)))
                s, p = _safe_corr(srocc, preds, mos), _safe_corr(plcc, preds, mos)
                history.val_srocc.append(s)
                history.val_plcc.append(p)
                if not math.isnan(s) and s > best_srocc:
                    best_srocc, history.best_epoch = s, epoch
                    best_state = copy.deepcopy(model.state_dict())
            history.epoch_seconds.append(time.perf_counter() - t0)
            if log_fh:
                row = {"epoch": epoch, "train_loss": history.train_loss[-1]}
                if val_records:
                    row.update(val_loss=history.val_loss[-1], val_srocc=history.val_srocc[-1],
                               val_plcc=history.val_plcc[-1])
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            log.info("epoch %d train_loss %.5f", epoch, history.train_loss[-1])
    finally:
        if log_fh:
            log_fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def _safe_corr(fn, a, b) -> float:
    try:
        return fn(a, b)
    except InvalidInputError:
        return float("nan")


# checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: FusionRegressor, train_config: TrainConfig | None = None,
                    seed: int | None = None, mode="joint") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "model_config": asdict(model.config),
        "train_config": asdict(train_config) if train_config else None,
        "seed": seed,
        "mode": AblationMode.parse(mode).value,
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_checkpoint(path) -> tuple[FusionRegressor, dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = build_model(FusionRegressorConfig(**blob["model_config"]), pretrained=False)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
