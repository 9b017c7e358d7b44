"""Optimizer, schedule, checkpointing, and the training loop.

Checkpoints use a purpose-built container instead of a zip-based format:
the bytes written are a pure function of the contents, so two identically
seeded runs produce identical files (zip archives embed timestamps).

Layout: magic b"VCKP", one version byte, a u32 little-endian header
length, a JSON header (sorted keys) describing metadata plus an array
manifest, then the raw float64 little-endian payloads in manifest order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .errors import ConfigError, ContractError, FormatError, NumericError, TrainingDiverged
from .params import ParameterSet

CKPT_MAGIC = b"VCKP"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# schedule


def noam_lr(step: int, warmup_steps: int, d: int) -> float:
    """Inverse-sqrt learning rate with linear warmup, scaled by width."""
    if step < 1:
        raise ContractError(f"schedule step must be >= 1, got {step}")
    if warmup_steps < 1 or d < 1:
        raise ContractError("warmup_steps and d must be positive")
    return d ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              step: int, lr: float, beta1: float = 0.9, beta2: float = 0.98,
              eps: float = 1e-9) -> None:
    """One bias-corrected moment update, in place."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Moment state over a named parameter set."""

    def __init__(self, params: ParameterSet, beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.step = 0

    def apply(self, lr: float) -> None:
        self.step += 1
        for name, t in self.params.items():
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(grad)):
                raise TrainingDiverged(
                    f"non-finite gradient in {name!r} at optimizer step {self.step}"
                )
            adam_step(t.data, grad, self.m[name], self.v[name], self.step, lr,
                      self.beta1, self.beta2, self.eps)

    def state(self) -> tuple[dict, dict, int]:
        return (
            {k: m.copy() for k, m in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
        )

    def load_state(self, m: dict, v: dict, step: int) -> None:
        if set(m) != set(self.m) or set(v) != set(self.v):
            raise ContractError("optimizer state names do not match parameters")
        for k in self.m:
            self.m[k][...] = m[k]
            self.v[k][...] = v[k]
        self.step = step


# ---------------------------------------------------------------------------
# checkpoint container


@dataclass
class Checkpoint:
    params: dict
    m: dict
    v: dict
    step: int
    epochs_done: int
    fingerprint: str
    config_text: str
    vocab_tokens: list[str]
    answer_tokens: list[str] | None = None
    train_history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    manifest = []
    blobs = []
    offset = 0
    for kind, table in (("param", ckpt.params), ("m", ckpt.m), ("v", ckpt.v)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f8")
            raw = arr.tobytes()
            manifest.append({
                "kind": kind, "name": name,
                "shape": list(arr.shape), "offset": offset, "bytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
    header = {
        "meta": {
            "step": ckpt.step,
            "epochs_done": ckpt.epochs_done,
            "fingerprint": ckpt.fingerprint,
            "config": ckpt.config_text,
            "vocab": ckpt.vocab_tokens,
            "answers": ckpt.answer_tokens,
            "train_history": ckpt.train_history,
            "val_history": ckpt.val_history,
        },
        "arrays": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(head)) + head + b"".join(blobs)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(out)


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 9 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack("<BI", blob[4:9])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 9 + head_len:
        raise FormatError(f"{path}: truncated header")
    header = json.loads(blob[9:9 + head_len].decode("utf-8"))
    payload = blob[9 + head_len:]
    tables: dict[str, dict] = {"param": {}, "m": {}, "v": {}}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["bytes"]
        if start + nbytes > len(payload):
            raise FormatError(f"{path}: truncated payload for {entry['name']!r}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f8")
        tables[entry["kind"]][entry["name"]] = arr.reshape(entry["shape"]).copy()
    meta = header["meta"]
    return Checkpoint(
        params=tables["param"], m=tables["m"], v=tables["v"],
        step=meta["step"], epochs_done=meta["epochs_done"],
        fingerprint=meta["fingerprint"], config_text=meta["config"],
        vocab_tokens=meta["vocab"], answer_tokens=meta["answers"],
        train_history=meta["train_history"], val_history=meta["val_history"],
    )


def model_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig | None = None):
    """Rebuild the trained model (dialogue or QA) a checkpoint describes.

    Passing ``cfg`` swaps in decode-time knobs (beam size, length cap);
    the fingerprint check still refuses anything that shaped the weights.
    """
    from .config import parse_config_text
    from .model import ResponseModel
    from .qa import AnswerVocabulary, QAModel
    from .vocab import Vocabulary

    if cfg is None:
        cfg = parse_config_text(ckpt.config_text)
    else:
        check_fingerprint(ckpt, cfg)
    vocab = Vocabulary(ckpt.vocab_tokens)
    if cfg.task == "dialogue":
        model = ResponseModel(cfg, vocab)
    else:
        answers = (
            AnswerVocabulary.from_tokens(ckpt.answer_tokens)
            if ckpt.answer_tokens else None
        )
        model = QAModel(cfg, vocab, answers)
    model.params.load_state(ckpt.params)
    return model


def check_fingerprint(ckpt: Checkpoint, cfg: TrainConfig) -> None:
    if ckpt.fingerprint != cfg.fingerprint():
        raise ConfigError(
            "checkpoint was trained under a different configuration; refusing "
            f"(checkpoint {ckpt.fingerprint[:12]}..., requested {cfg.fingerprint()[:12]}...)"
        )


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


class Trainer:
    """Gradient-accumulating loop over per-example losses.

    `example_loss(item)` must return a size-1 tensor attached to the
    active tape. Batches average accumulated gradients; validation reuses
    the same callable without a tape. The best snapshot (by validation
    loss) survives divergence, so a halted run still holds usable state.
    """

    def __init__(self, cfg: TrainConfig, params: ParameterSet, example_loss,
                 train_items: list, val_items: list,
                 stop_train_loss: float | None = None,
                 vocab_tokens: list[str] | None = None,
                 answer_tokens: list[str] | None = None):
        if not train_items:
            raise ContractError("training needs at least one example")
        self.vocab_tokens = vocab_tokens or []
        self.answer_tokens = answer_tokens
        self.cfg = cfg
        self.params = params
        self.example_loss = example_loss
        self.train_items = train_items
        self.val_items = val_items or train_items
        self.stop_train_loss = stop_train_loss
        self.batches_per_epoch = math.ceil(len(train_items) / cfg.batch_size)
        self.warmup_steps = max(1, cfg.warmup_epochs * self.batches_per_epoch)
        self.adam = Adam(params)
        self.epochs_done = 0
        self.train_history: list[float] = []
        self.val_history: list[float] = []
        self.rows: list[EpochRow] = []
        self.last_lr = 0.0
        self.best_val = math.inf
        self.best: Checkpoint | None = None

    # -- state plumbing ------------------------------------------------------

    def snapshot(self) -> Checkpoint:
        m, v, step = self.adam.state()
        return Checkpoint(
            params=self.params.state(), m=m, v=v, step=step,
            epochs_done=self.epochs_done,
            fingerprint=self.cfg.fingerprint(),
            config_text=self.cfg.to_text(),
            vocab_tokens=list(self.vocab_tokens),
            answer_tokens=self.answer_tokens,
            train_history=list(self.train_history),
            val_history=list(self.val_history),
        )

    def resume(self, ckpt: Checkpoint) -> None:
        check_fingerprint(ckpt, self.cfg)
        self.params.load_state(ckpt.params)
        self.adam.load_state(ckpt.m, ckpt.v, ckpt.step)
        self.epochs_done = ckpt.epochs_done
        self.train_history = list(ckpt.train_history)
        self.val_history = list(ckpt.val_history)
        if self.val_history:
            self.best_val = min(self.val_history)
        self.best = ckpt

    # -- core ------------------------------------------------------------------

    def _epoch_order(self, epoch: int) -> np.ndarray:
        seq = np.random.SeedSequence(entropy=self.cfg.seed, spawn_key=(epoch,))
        return np.random.Generator(np.random.PCG64(seq)).permutation(len(self.train_items))

    def _train_epoch(self, epoch: int) -> float:
        order = self._epoch_order(epoch)
        total = 0.0
        for start in range(0, len(order), self.cfg.batch_size):
            batch = order[start:start + self.cfg.batch_size]
            self.params.zero_grads()
            for idx in batch:
                with T.GradientTape() as tape:
                    loss = self.example_loss(self.train_items[int(idx)])
                    T.backward(loss, tape)
                value = loss.data.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
                total += value
            if len(batch) > 1:
                inv = 1.0 / len(batch)
                for _, t in self.params.items():
                    if t.grad is not None:
                        t.grad *= inv
            self.last_lr = noam_lr(self.adam.step + 1, self.warmup_steps, self.cfg.d)
            self.adam.apply(self.last_lr)
        return total / len(order)

    def validate(self) -> float:
        total = 0.0
        for item in self.val_items:
            total += self.example_loss(item).data.item()
        value = total / len(self.val_items)
        if not math.isfinite(value):
            raise TrainingDiverged("non-finite validation loss")
        return value

    def run(self, on_epoch=None) -> list[EpochRow]:
        if self.cfg.max_epochs == 0 or self.epochs_done >= self.cfg.max_epochs:
            if self.best is None:
                self.best = self.snapshot()
            return self.rows
        if self.best is None:
            # an untrained snapshot so divergence in epoch 1 still leaves state
            self.best = self.snapshot()
        for epoch in range(self.epochs_done + 1, self.cfg.max_epochs + 1):
            try:
                train_loss = self._train_epoch(epoch)
                self.epochs_done = epoch
                val_loss = self.validate()
            except NumericError as exc:
                # the tensor layer rejects non-finite values at the site
                # they appear; surface it as divergence, best state intact
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            self.train_history.append(train_loss)
            self.val_history.append(val_loss)
            row = EpochRow(epoch, train_loss, val_loss, self.last_lr)
            self.rows.append(row)
            if val_loss < self.best_val:
                self.best_val = val_loss
                self.best = self.snapshot()
            if on_epoch is not None:
                on_epoch(row)
            if self.stop_train_loss is not None and train_loss < self.stop_train_loss:
                break
        return self.rows
