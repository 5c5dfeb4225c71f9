"""Optimizers, the training loop, evaluation and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import SamplePair, stack_samples
from .losses import LossConfig, joint_loss
from .metrics import image_metrics
from .model import MmccNet, ModelConfig, build_mmcc_net
from .tensor import Tensor

logger = logging.getLogger(__name__)

LEARNING_RATE_GRID = (3e-4, 4e-4, 5e-4, 2e-3, 1e-3, 1e-4)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class MissingGradientError(RuntimeError):
    pass


# -- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}; expected 'sgd' or 'adam'")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    def hyperparameters(self) -> dict:
        return dict(kind=self.kind, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, step_count=self.step_count)


def optimizer_step(state: OptimizerState, params: dict[str, Tensor]) -> None:
    """Apply one update in place and clear the gradients."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]!r}")
    state.step_count += 1
    t = state.step_count
    if state.kind == "sgd":
        for p in params.values():
            p.data -= (state.lr * p.grad).astype(p.dtype)
            p.grad = None
        return
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad.astype(p.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype)
        p.grad = None


# -- plans and logs -------------------------------------------------------------


@dataclass
class TrainPlan:
    epochs: int = 60
    batch_size: int = 8
    patience: int = 10
    loss: str = "joint"
    optimizer: str = "adam"
    lr: float = 1e-4
    seed: int = 0
    aux_weight: float = 0.3
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        LossConfig(kind=self.loss)

    def loss_config(self) -> LossConfig:
        return LossConfig(kind=self.loss)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train plan keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_dice: float
    val_dice: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    CSV_HEADER = "epoch,train_loss,val_loss,train_dice,val_dice"

    def to_csv(self) -> str:
        rows = [self.CSV_HEADER]
        for r in self.records:
            rows.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.train_dice!r},{r.val_dice!r}")
        return "\n".join(rows) + "\n"

    @property
    def last(self) -> EpochRecord:
        return self.records[-1]


# -- training loop -------------------------------------------------------------


def _thresholded_dice(prob: np.ndarray, mask: np.ndarray, threshold: float) -> np.ndarray:
    n = prob.shape[0]
    p = (prob.reshape(n, -1) >= threshold).astype(np.float64)
    m = mask.reshape(n, -1)
    num = 2 * (p * m).sum(axis=1)
    den = p.sum(axis=1) + m.sum(axis=1)
    return np.where(den == 0, 1.0, num / np.where(den == 0, 1.0, den))


class Trainer:
    """Stateful training run: one model, one optimizer, one seeded RNG.

    The whole state (including early-stopping bookkeeping) round-trips
    through :meth:`save` / :meth:`resume`, so an interrupted run continues
    bit-identically.
    """

    def __init__(self, model: MmccNet, plan: TrainPlan, optimizer: OptimizerState | None = None):
        self.model = model
        self.plan = plan
        self.optimizer = optimizer or OptimizerState(kind=plan.optimizer, lr=plan.lr)
        self.rng = np.random.default_rng(plan.seed)
        self.epoch = 0
        self.log = TrainLog()
        self.best_dice = -math.inf
        self.best_state: dict[str, np.ndarray] | None = None
        self.since_best = 0
        self.finished = False

    def _loss(self, prob: Tensor, aux: list[Tensor], target: np.ndarray) -> Tensor:
        cfg = self.plan.loss_config()
        loss = joint_loss(prob, target, cfg)
        for a in aux:
            loss = loss + self.plan.aux_weight * joint_loss(a, target, cfg)
        return loss

    def run_epoch(self, train: list[SamplePair], val: list[SamplePair]) -> EpochRecord:
        model, plan = self.model, self.plan
        images, masks = stack_samples(train)
        images = images.astype(model.dtype)
        masks = masks.astype(model.dtype)
        order = self.rng.permutation(len(train))
        model.train()
        losses, dices = [], []
        for b, start in enumerate(range(0, len(order), plan.batch_size)):
            idx = order[start : start + plan.batch_size]
            with T.Tape() as tape:
                prob, aux = model.forward(Tensor(images[idx]), return_aux=True)
                loss = self._loss(prob, aux, masks[idx])
                value = float(loss.data)
                if not math.isfinite(value):
                    ids = [train[i].id for i in idx]
                    raise NumericError(f"non-finite loss {value} at epoch {self.epoch + 1}, batch {b} (samples {ids})")
                T.backward(loss)
                tape.clear()
            optimizer_step(self.optimizer, model.params)
            losses.append(value * len(idx))
            dices.extend(_thresholded_dice(prob.data, masks[idx], plan.threshold))
        self.epoch += 1
        val_loss, val_dice = self.validate(val)
        rec = EpochRecord(self.epoch, sum(losses) / len(train), val_loss, float(np.mean(dices)), val_dice)
        self.log.records.append(rec)
        self._track(rec, bool(val))
        logger.info("epoch %d train_loss %.5f val_loss %.5f train_dice %.4f val_dice %.4f",
                    rec.epoch, rec.train_loss, rec.val_loss, rec.train_dice, rec.val_dice)
        return rec

    def validate(self, val: list[SamplePair]) -> tuple[float, float]:
        if not val:
            return float("nan"), float("nan")
        images, masks = stack_samples(val)
        prob = self.model.predict_proba(images.astype(self.model.dtype), self.plan.batch_size)
        with T.no_grad():
            loss = float(joint_loss(Tensor(prob), masks.astype(prob.dtype), self.plan.loss_config()).data)
        return loss, float(_thresholded_dice(prob, masks, self.plan.threshold).mean())

    def _track(self, rec: EpochRecord, has_val: bool) -> None:
        if not has_val:
            self.log.best_epoch = rec.epoch
            return
        if rec.val_dice > self.best_dice:
            self.best_dice = rec.val_dice
            self.best_state = self.model.copy_state()
            self.log.best_epoch = rec.epoch
            self.since_best = 0
        else:
            self.since_best += 1

    def fit(self, train: list[SamplePair], val: list[SamplePair] | None = None, epochs: int | None = None) -> TrainLog:
        """Train until ``plan.epochs`` (or ``epochs`` more) or early stopping."""
        if not train:
            raise ValueError("training split is empty")
        val = val or []
        target = self.plan.epochs if epochs is None else min(self.plan.epochs, self.epoch + epochs)
        while self.epoch < target and not self.finished:
            self.run_epoch(train, val)
            if val and self.since_best >= self.plan.patience:
                self.log.stopped_early = True
                self.finished = True
        if self.epoch >= self.plan.epochs:
            self.finished = True
        if self.finished and self.best_state is not None:
            self.model.load_state_arrays(self.best_state)
        return self.log

    # -- persistence ---------------------------------------------------------
    def save(self, path) -> None:
        extra = {}
        if self.best_state is not None:
            extra = {f"best/{k}": v for k, v in self.best_state.items()}
        meta = dict(
            epoch=self.epoch,
            plan=self.plan.to_dict(),
            rng_state=self.rng.bit_generator.state,
            best_dice=None if self.best_dice == -math.inf else self.best_dice,
            since_best=self.since_best,
            finished=self.finished,
            log=[asdict(r) for r in self.log.records],
            best_epoch=self.log.best_epoch,
            stopped_early=self.log.stopped_early,
        )
        checkpoint_save(path, self.model, self.optimizer, meta=meta, extra_arrays=extra)

    @classmethod
    def resume(cls, path, expected_config: ModelConfig | None = None) -> "Trainer":
        ck = checkpoint_load(path, expected_config)
        meta = ck.meta
        trainer = cls(ck.model, TrainPlan.from_dict(meta["plan"]), ck.optimizer)
        trainer.epoch = meta["epoch"]
        trainer.rng.bit_generator.state = meta["rng_state"]
        trainer.best_dice = -math.inf if meta["best_dice"] is None else meta["best_dice"]
        trainer.since_best = meta["since_best"]
        trainer.finished = meta["finished"]
        trainer.log = TrainLog([EpochRecord(**r) for r in meta["log"]], meta["best_epoch"], meta["stopped_early"])
        best = {k[len("best/"):]: v for k, v in ck.extra.items() if k.startswith("best/")}
        trainer.best_state = best or None
        return trainer


def train(
    model: MmccNet,
    train_samples: list[SamplePair],
    val_samples: list[SamplePair] | None,
    plan: TrainPlan,
    optimizer: OptimizerState | None = None,
) -> TrainLog:
    return Trainer(model, plan, optimizer).fit(train_samples, val_samples)


# -- evaluation -----------------------------------------------------------------


@dataclass
class MetricsReport:
    per_image: list[dict]
    means: dict[str, float]

    def to_dict(self) -> dict:
        return dict(per_image=self.per_image, means=self.means)


def summarize(per_image: list[dict]) -> dict[str, float]:
    keys = [k for k in per_image[0] if k != "id"]
    means = {}
    for k in keys:
        vals = np.array([r[k] for r in per_image], dtype=np.float64)
        finite = vals[~np.isnan(vals)]
        means[k] = float(finite.mean()) if len(finite) else float("nan")
    return means


def evaluate_predictions(probs: np.ndarray, samples: list[SamplePair], threshold: float = 0.5) -> MetricsReport:
    if not samples:
        raise ValueError("no samples to evaluate")
    rows = []
    for prob, s in zip(probs, samples):
        rows.append(dict(id=s.id, **image_metrics(prob, s.mask, threshold)))
    return MetricsReport(rows, summarize(rows))


def evaluate(model: MmccNet, samples: list[SamplePair], threshold: float = 0.5, batch_size: int = 8) -> MetricsReport:
    """Per-image metrics (ratio metrics, ``hdd``, ``auc``) and their means.

    Images whose ground truth has a single class get ``auc = NaN`` and are
    left out of the AUC mean.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    images, _ = stack_samples(samples)
    probs = model.predict_proba(images.astype(model.dtype), batch_size)
    return evaluate_predictions(probs, samples, threshold)


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"MMCC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: MmccNet
    optimizer: OptimizerState
    meta: dict
    extra: dict[str, np.ndarray]


def _write_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_save(path, model: MmccNet, optimizer: OptimizerState, meta: dict | None = None, extra_arrays=None) -> None:
    """Write ``MMCC | version | metadata | records | sha256``.

    Records are little-endian float32. Metadata is length-prefixed JSON
    holding the model config, manifest hash and optimizer hyperparameters.
    """
    header = dict(
        model_config=model.config.to_dict(),
        manifest_hash=model.manifest_hash(),
        optimizer=optimizer.hyperparameters(),
        dtype=str(model.dtype),
        meta=meta or {},
    )
    arrays = dict(model.state_arrays())
    for name in model.params:
        if name in optimizer.m:
            arrays[f"adam_m/{name}"] = optimizer.m[name]
            arrays[f"adam_v/{name}"] = optimizer.v[name]
    arrays.update(extra_arrays or {})
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    text = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        _write_record(buf, name, arr)
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def checkpoint_load(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 4 + 4 + 32 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    header = json.loads(r.take(r.u32()).decode())
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    config = ModelConfig.from_dict(header["model_config"])
    model = build_mmcc_net(config)
    if model.manifest_hash() != header["manifest_hash"]:
        raise ManifestMismatchError(f"{path}: manifest hash does not match the stored model config")
    if expected_config is not None:
        expected = build_mmcc_net(expected_config).manifest_hash()
        if expected != header["manifest_hash"]:
            raise ManifestMismatchError(f"{path}: checkpoint was written for a different model configuration")
    model.load_state_arrays(arrays)
    opt_hp = header["optimizer"]
    opt = OptimizerState(**opt_hp)
    for name in model.params:
        if f"adam_m/{name}" in arrays:
            opt.m[name] = arrays[f"adam_m/{name}"].copy()
            opt.v[name] = arrays[f"adam_v/{name}"].copy()
    known = ("param/", "buffer/", "adam_m/", "adam_v/")
    extra = {k: v for k, v in arrays.items() if not k.startswith(known)}
    return Checkpoint(model, opt, header.get("meta", {}), extra)


def build_and_train(
    train_samples, val_samples, model_config: ModelConfig, plan: TrainPlan
) -> tuple[MmccNet, TrainLog]:
    model = build_mmcc_net(model_config)
    log = train(model, train_samples, val_samples, plan)
    return model, log
