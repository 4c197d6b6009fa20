"""Selective-unfreezing fine-tuning: parameter tiers, warmup/cosine schedule, AdamW, epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .checkpoint import Checkpoint
from .dataset import StudyRecord, load_splits
from .encoder import EncoderConfig
from .errors import ConfigurationError, NumericError, UndefinedMetricError
from .evaluation import Prediction, aggregate_study, auroc, confusion_and_point_metrics, select_threshold
from .head import HeadConfig
from .model import Model, init_model
from .preprocess import PreprocessConfig, load_png, normalize, replicate_channels, resize_bilinear
from .preprocess import augment as augment_image

if TYPE_CHECKING:
    from .config import RunConfig

logger = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "train_loss", "val_auroc", "val_f1", "lr_head", "lr_encoder")


@dataclass(frozen=True)
class TrainConfig:
    unfreeze_k: int = 2
    lr_encoder: float = 1e-4
    lr_head: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 8
    warmup_fraction: float = 0.05
    seed: int = 0
    pos_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.unfreeze_k < 0:
            raise ConfigurationError("unfreeze_k must be >= 0")
        if not self.lr_head >= self.lr_encoder > 0:
            raise ConfigurationError("learning rates must satisfy lr_head >= lr_encoder > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigurationError("warmup_fraction must lie in [0, 1)")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError("betas must be two values in [0, 1)")
        if self.weight_decay < 0 or self.eps <= 0 or self.pos_weight <= 0:
            raise ConfigurationError("weight_decay >= 0, eps > 0 and pos_weight > 0 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------- parameter tiers


@dataclass(frozen=True)
class Partition:
    frozen: tuple[str, ...]
    encoder_tier: tuple[str, ...]
    head_tier: tuple[str, ...]


def select_trainable(names: Sequence[str], k: int, num_layers: int) -> Partition:
    """Split qualified parameter names into frozen / last-K-blocks / head tiers."""
    if not 0 <= k <= num_layers:
        raise ConfigurationError(f"cannot unfreeze {k} of {num_layers} encoder blocks")
    first_trainable = num_layers - k
    frozen, enc, head = [], [], []
    for name in names:
        if name.startswith("head."):
            head.append(name)
        elif name.startswith("encoder.layers."):
            idx = int(name.split(".")[2])
            (enc if idx >= first_trainable else frozen).append(name)
        else:
            frozen.append(name)
    return Partition(tuple(frozen), tuple(enc), tuple(head))


def decays(name: str) -> bool:
    """Weight decay applies to matrices only, never to LN parameters or biases."""
    leaf = name.rsplit(".", 1)[-1]
    return not (leaf in ("gamma", "beta", "bias") or leaf.endswith("_b"))


# ---------------------------------------------------------------- schedule


def schedule_factor(step: float, total_steps: int, warmup_steps: int) -> float:
    """Shape of the rate schedule in [0, 1]: linear warmup, then half-cosine to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return step / warmup_steps
    span = total_steps - warmup_steps
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return max(0.0, 0.5 * (1.0 + math.cos(math.pi * progress)))


def lr_at(step: float, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear warmup to ``peak`` then half-cosine decay to zero at ``total_steps``."""
    return peak * schedule_factor(step, total_steps, warmup_steps)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
               decay: Callable[[str], bool] = decays) -> None:
    """One in-place AdamW update with decoupled decay and bias correction."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        data = p.data
        if weight_decay and decay(name):
            data = data - lr * weight_decay * data
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (data - update).astype(p.data.dtype)


# ---------------------------------------------------------------- data plumbing


class ImageStore:
    """Decoded, resized single-channel views in [0, 1], cached in memory."""

    def __init__(self, size: int):
        self.size = size
        self._cache: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        arr = self._cache.get(path)
        if arr is None:
            raw = load_png(path)
            arr = resize_bilinear(replicate_channels(raw)[:1], self.size)[0]
            self._cache[path] = arr
        return arr

    def batch(self, paths: Sequence[str], cfg: PreprocessConfig, dtype,
              aug_rngs: Sequence[RngStream] | None = None) -> np.ndarray:
        out = np.empty((len(paths), 3, self.size, self.size), dtype=dtype)
        for i, path in enumerate(paths):
            x = np.repeat(self.get(path)[None], 3, axis=0)
            if aug_rngs is not None and cfg.augment.enabled:
                x = augment_image(x, cfg.augment, aug_rngs[i])
            out[i] = normalize(x, cfg.mean, cfg.std)
        return out


def predict_studies(model: Model, records: Sequence[StudyRecord], store: ImageStore,
                    cfg: PreprocessConfig, batch_size: int = 32) -> list[Prediction]:
    """Eval-mode view probabilities averaged per study, in record order."""
    paths = [p for r in records for p in r.view_paths]
    dtype = next(iter(model.encoder.values())).dtype
    probs = []
    for start in range(0, len(paths), batch_size):
        chunk = paths[start:start + batch_size]
        probs.append(model.predict_proba(store.batch(chunk, cfg, dtype), batch_size))
    flat = np.concatenate(probs) if probs else np.zeros(0)
    preds, pos = [], 0
    for r in records:
        view_probs = tuple(float(p) for p in flat[pos:pos + len(r.view_paths)])
        pos += len(r.view_paths)
        preds.append(Prediction(r.patient_id, r.study_id, r.anatomy, view_probs, aggregate_study(view_probs)))
    return preds


def validation_metrics(preds: Sequence[Prediction], labels: Sequence[int]) -> tuple[float, float, float]:
    """(AUROC, F1, threshold) with the threshold chosen on these same predictions; NaN if single-class."""
    probs = [p.prob for p in preds]
    try:
        auc = auroc(probs, labels)
        t = select_threshold(probs, labels)
    except UndefinedMetricError:
        return float("nan"), float("nan"), float("nan")
    return auc, confusion_and_point_metrics(probs, labels, t).f1, t


# ---------------------------------------------------------------- loop


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_auroc: float
    val_f1: float
    lr_head: float
    lr_encoder: float

    def line(self) -> str:
        return ",".join([str(self.epoch)] + [repr(float(getattr(self, k))) for k in LOG_HEADER[1:]])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochLog]
    model: Model  # parameters as of the last epoch
    initial: dict[str, np.ndarray]
    partition: Partition
    splits: tuple


class TrainingDiverged(NumericError):
    pass


def model_tensors(model: Model) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.named_parameters().items()}


class Trainer:
    """Drives one run; not safe to call from two threads at once."""

    def __init__(self, model: Model, train_cfg: TrainConfig, pre_cfg: PreprocessConfig,
                 store: ImageStore | None = None):
        self.model = model
        self.cfg = train_cfg
        self.pre = pre_cfg
        self.store = store or ImageStore(pre_cfg.image_size)
        self.params = model.named_parameters()
        self.partition = select_trainable(list(self.params), train_cfg.unfreeze_k,
                                          model.encoder_cfg.num_layers)
        for name, t in self.params.items():
            t.requires_grad = name not in self.partition.frozen
        self.tiers = {
            "encoder": {n: self.params[n] for n in self.partition.encoder_tier},
            "head": {n: self.params[n] for n in self.partition.head_tier},
        }
        self.states = {"encoder": OptimizerState(), "head": OptimizerState()}
        self.rng = RngStream(train_cfg.seed)

    def peaks(self) -> dict[str, float]:
        return {"encoder": self.cfg.lr_encoder, "head": self.cfg.lr_head}

    def step(self, images: np.ndarray, labels: np.ndarray, lrs: dict[str, float],
             dropout_rng: RngStream) -> float:
        """Forward, backward and one AdamW update per tier; returns the batch loss."""
        for t in self.params.values():
            t.grad = None
        probs = self.model.forward(Tensor(images), train=True, rng=dropout_rng)
        loss = ad.bce_loss(probs, labels.astype(images.dtype), self.cfg.pos_weight)
        loss.backward()
        for tier, params in self.tiers.items():
            if not params:
                continue
            grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()}
            adamw_step(params, grads, self.states[tier], lrs[tier], self.cfg.betas, self.cfg.eps,
                       self.cfg.weight_decay)
        return loss.item()

    def fit(self, train_records: Sequence[StudyRecord], val_records: Sequence[StudyRecord],
            on_epoch: Callable[[EpochLog], None] | None = None):
        cfg = self.cfg
        items = [(p, r.label) for r in train_records for p in r.view_paths]
        if not items:
            raise ConfigurationError("training split holds no images")
        dtype = next(iter(self.params.values())).dtype
        n = len(items)
        per_epoch = math.ceil(n / cfg.batch_size)
        total = cfg.epochs * per_epoch
        warmup = min(int(cfg.warmup_fraction * total), total - 1)
        val_labels = [r.label for r in val_records]

        history: list[EpochLog] = []
        best = None
        global_step = 0
        for epoch in range(1, cfg.epochs + 1):
            order = self.rng.substream(1, epoch).permutation(n)
            losses, weights = [], []
            lrs = {}
            for b in range(per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                aug = [self.rng.substream(2, epoch, int(i)) for i in idx]
                images = self.store.batch([items[i][0] for i in idx], self.pre, dtype, aug)
                labels = np.array([items[i][1] for i in idx])
                global_step += 1
                factor = schedule_factor(global_step, total, warmup)
                lrs = {t: peak * factor for t, peak in self.peaks().items()}
                try:
                    loss = self.step(images, labels, lrs, self.rng.substream(3, epoch, b))
                except NumericError as exc:
                    raise TrainingDiverged(f"epoch {epoch}, step {global_step}: {exc}") from exc
                losses.append(loss)
                weights.append(len(idx))
            train_loss = float(np.average(losses, weights=weights))
            if val_records:
                preds = predict_studies(self.model, val_records, self.store, self.pre, cfg.batch_size)
                val_auc, val_f1, _ = validation_metrics(preds, val_labels)
            else:
                val_auc = val_f1 = float("nan")
            entry = EpochLog(epoch, train_loss, val_auc, val_f1, lrs["head"], lrs["encoder"])
            history.append(entry)
            logger.info("epoch %d loss %.4f val_auroc %.4f val_f1 %.4f", epoch, train_loss, val_auc, val_f1)
            if on_epoch:
                on_epoch(entry)
            if best is None or (not math.isnan(val_auc) and (math.isnan(best[0]) or val_auc > best[0])):
                best = (val_auc, epoch, model_tensors(self.model), self.optimizer_snapshot())
        return history, best

    def optimizer_snapshot(self) -> tuple[dict[str, np.ndarray], dict[str, int]]:
        arrays, steps = {}, {}
        for tier, st in self.states.items():
            steps[tier] = st.step
            for name in st.m:
                arrays[f"{tier}.m.{name}"] = st.m[name].copy()
                arrays[f"{tier}.v.{name}"] = st.v[name].copy()
        return arrays, steps


def train(run: "RunConfig", on_epoch: Callable[[EpochLog], None] | None = None,
          splits=None) -> TrainResult:
    """Full run: split data, initialize, fit, and package the best-validation-AUROC checkpoint."""
    if splits is None:
        splits = load_splits(run.data_root, run.split)
    train_recs, val_recs, _ = splits
    model = init_model(run.encoder, run.train.seed, run.head)
    initial = model_tensors(model)
    trainer = Trainer(model, run.train, run.preprocess)
    history, best = trainer.fit(train_recs, val_recs, on_epoch)
    val_auc, epoch, tensors, (opt_arrays, opt_steps) = best
    ckpt = Checkpoint(
        config=run.to_dict(),
        tensors=tensors,
        optimizer=opt_arrays,
        optimizer_steps=opt_steps,
        rng=list(trainer.rng.state()),
        metrics={"best_epoch": epoch, "val_auroc": val_auc,
                 "history": [asdict(h) for h in history]},
    )
    return TrainResult(ckpt, history, model, initial, trainer.partition, splits)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    enc_cfg = EncoderConfig(**ckpt.config["encoder"])
    head_cfg = HeadConfig(**ckpt.config["head"])
    model = init_model(enc_cfg, 0, head_cfg)
    for name, t in model.named_parameters().items():
        if name not in ckpt.tensors:
            raise ConfigurationError(f"checkpoint lacks tensor {name}")
        arr = ckpt.tensors[name]
        if arr.shape != t.shape:
            raise ConfigurationError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data = arr.astype(t.dtype).copy()
    return model


def checkpoint_from_model(model: Model, config: dict, metrics: dict | None = None) -> Checkpoint:
    return Checkpoint(config=config, tensors=model_tensors(model), metrics=metrics or {})
