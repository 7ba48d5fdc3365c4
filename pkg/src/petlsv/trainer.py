"""Training loops: standard fine-tuning, large-margin fine-tuning, two-stage tuning."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from petlsv.datagen import Manifest, augment
from petlsv.errors import ContractError, DivergenceError, InputError
from petlsv.model import SpeakerModel
from petlsv.numcore.checkpoint import load_checkpoint
from petlsv.numcore.rng import make_rng
from petlsv.numcore.tensor import backward
from petlsv.petl import PetlConfig

log = logging.getLogger(__name__)

PAPER_BATCH_SIZE = 120


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    base_lr: float = 1e-3
    lr_decay_per_epoch: float = 0.95
    batch_size: int = 32  # the paper trains with 120 (PAPER_BATCH_SIZE)
    crop_s: float = 3.0
    margin: float = 0.2
    scale: float = 30.0
    seed: int = 0
    petl: PetlConfig = field(default_factory=lambda: PetlConfig("full"))
    init_from: str | None = None
    backbone: object = "desk"
    optimizer: str = "sgd"
    momentum: float = 0.9
    augment_prob: float = 0.6
    sample_rate: int = 16000
    debug_freeze_check: bool = True
    constant_lr: bool = False
    head_init: str = "class_mean"  # or "random"
    # batches are split so each chunk holds at most this many attention probabilities
    attn_budget: int = 2**24

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise InputError("lr_decay_per_epoch must lie in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        if self.head_init not in ("class_mean", "random"):
            raise InputError(f"unknown head_init {self.head_init!r}")
        if isinstance(self.petl, dict):
            object.__setattr__(self, "petl", PetlConfig.from_dict(self.petl))

    def lr(self, epoch: int) -> float:
        if self.constant_lr:
            return self.base_lr
        return self.base_lr * self.lr_decay_per_epoch**epoch

    def to_dict(self):
        d = asdict(self)
        d["petl"] = self.petl.to_dict()
        if not isinstance(self.backbone, str):
            d["backbone"] = self.backbone.to_dict() if hasattr(self.backbone, "to_dict") else dict(self.backbone)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class LmFtConfig:
    extra_epochs: int = 2
    crop_s: float = 5.0
    margin: float = 0.5


@dataclass
class TrainResult:
    model: SpeakerModel
    log: list
    checkpoint: Path | None
    config: TrainConfig

    @property
    def epoch_losses(self):
        return [r["loss"] for r in self.log if r["step"] is None]

    @property
    def final_lr(self) -> float:
        return self.config.lr(self.config.epochs - 1)


class Optimizer:
    """SGD with momentum (or Adam) over trainable groups only."""

    def __init__(self, groups, kind="sgd", momentum=0.9, betas=(0.9, 0.999), eps=1e-8):
        self.groups = [g for g in groups if g.trainable]
        self.kind = kind
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.state = {g.name: np.zeros_like(g.data) for g in self.groups}
        self.state2 = {g.name: np.zeros_like(g.data) for g in self.groups} if kind == "adam" else {}
        self.t = 0

    def step(self, grads: dict, lr: float):
        self.t += 1
        for g in self.groups:
            grad = grads.get(g.name)
            if grad is None:
                continue
            grad = grad.astype(g.data.dtype, copy=False)
            m = self.state[g.name]
            if self.kind == "sgd":
                m *= self.momentum
                m += grad
                g.tensor.data -= g.data.dtype.type(lr) * m
            else:
                b1, b2 = self.betas
                v = self.state2[g.name]
                m *= b1
                m += (1 - b1) * grad
                v *= b2
                v += (1 - b2) * grad * grad
                mhat = m / (1 - b1**self.t)
                vhat = v / (1 - b2**self.t)
                g.tensor.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(g.data.dtype)


def crop(wave, n: int, rng):
    """Random ``n``-sample window; shorter waveforms are zero-padded at the end."""
    if wave.size <= n:
        out = np.zeros(n, np.float32)
        out[: wave.size] = wave
        return out
    start = int(rng.integers(0, wave.size - n + 1))
    return wave[start : start + n]


def make_batches(manifest, speakers, cfg: TrainConfig, epoch: int, cache: dict, crop_s: float | None = None):
    """Yield ``(waveforms (B, N), labels)`` for one epoch; order is seeded per epoch."""
    rng = make_rng(cfg.seed, "epoch", epoch)
    order = rng.permutation(len(manifest))
    n = int(round((crop_s or cfg.crop_s) * cfg.sample_rate))
    label = {s: i for i, s in enumerate(speakers)}
    for lo in range(0, len(order), cfg.batch_size):
        idx = order[lo : lo + cfg.batch_size]
        waves, labels = [], []
        for i in idx:
            u = manifest[i]
            if u.utt_id not in cache:
                cache[u.utt_id] = u.load(cfg.sample_rate)
            w = crop(cache[u.utt_id], n, rng)
            if cfg.augment_prob > 0:
                w = augment(w, rng, cfg.augment_prob)
            waves.append(w)
            labels.append(label[u.speaker_id])
        yield np.stack(waves).astype(np.float32), np.asarray(labels)


def _frozen_snapshot(model):
    return {g.name: g.data.tobytes() for g in model.groups() if not g.trainable}


def _check_frozen(model, snap, epoch):
    for g in model.groups():
        if g.name in snap and g.data.tobytes() != snap[g.name]:
            raise ContractError(f"frozen group {g.name} modified during epoch {epoch}")


def micro_batch_size(model: SpeakerModel, n_samples: int, batch: int, budget: int) -> int:
    cfg = model.cfg
    t = cfg.n_frames(n_samples) + (model.petl.l if model.petl is not None and model.petl.uses_prefix else 0)
    per_item = cfg.n_heads * t * t
    return max(1, min(batch, budget // max(per_item, 1)))


def _batch_grads(model, groups, waves, labels, margin, budget):
    """Mean loss and its gradients, accumulated over chunks that fit the attention budget."""
    n = len(labels)
    size = micro_batch_size(model, waves.shape[1], n, budget)
    if size >= n:
        loss = model.loss(waves, labels, margin)
        return loss.item(), backward(loss, groups)
    value, total = 0.0, {}
    for lo in range(0, n, size):
        hi = min(n, lo + size)
        loss = model.loss(waves[lo:hi], labels[lo:hi], margin)
        w = (hi - lo) / n
        value += w * loss.item()
        for name, g in backward(loss, groups).items():
            g = g * g.dtype.type(w)
            if name in total:
                total[name] += g
            else:
                total[name] = g
    return value, total


def fit(model: SpeakerModel, manifest, cfg: TrainConfig, lr_of_epoch=None, crop_s=None, margin=None, epochs=None):
    """Core optimisation loop; returns the metrics log rows."""
    lr_of_epoch = lr_of_epoch or cfg.lr
    epochs = cfg.epochs if epochs is None else epochs
    margin = cfg.margin if margin is None else margin
    groups = model.groups()
    opt = Optimizer(groups, cfg.optimizer, cfg.momentum)
    snap = _frozen_snapshot(model) if cfg.debug_freeze_check else None
    cache, rows = {}, []
    for epoch in range(epochs):
        lr = lr_of_epoch(epoch)
        losses = []
        for step, (waves, labels) in enumerate(make_batches(manifest, model.speakers, cfg, epoch, cache, crop_s)):
            value, grads = _batch_grads(model, groups, waves, labels, margin, cfg.attn_budget)
            if not np.isfinite(value):
                raise DivergenceError(f"loss is {value} at epoch {epoch}, step {step}")
            opt.step(grads, lr)
            losses.append(value)
            rows.append({"epoch": epoch, "step": step, "lr": lr, "loss": value})
        rows.append({"epoch": epoch, "step": None, "lr": lr, "loss": float(np.mean(losses))})
        log.info("epoch %d lr %.3g mean loss %.4f", epoch, lr, rows[-1]["loss"])
        if snap is not None:
            _check_frozen(model, snap, epoch)
    return rows


def _write_outputs(out_dir, model, rows, config: dict, ckpt_name: str, **meta):
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{Path(ckpt_name).stem}.metrics.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    (out / f"{Path(ckpt_name).stem}.config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    path = out / ckpt_name
    model.save(path, **meta)
    return path


def init_head_from_means(model: SpeakerModel, manifest, sample_rate: int = 16000, per_speaker: int = 4):
    """Set each class column to the mean unit embedding of (up to) ``per_speaker`` of its utterances."""
    by_spk = {}
    for u in manifest:
        by_spk.setdefault(u.speaker_id, [])
        if len(by_spk[u.speaker_id]) < per_speaker:
            by_spk[u.speaker_id].append(u)
    C = np.zeros_like(model.head.C.data)
    for j, spk in enumerate(model.speakers):
        embs = [model.embed_numpy(u.load(sample_rate)) for u in by_spk[spk]]
        C[:, j] = np.mean([e / max(np.linalg.norm(e), 1e-12) for e in embs], axis=0)
    model.head.C.tensor.data = C


def build_model(cfg: TrainConfig, speakers) -> SpeakerModel:
    """Fresh or ``init_from``-initialised model instrumented per ``cfg.petl``.

    With ``init_from``, backbone and back-end come from the checkpoint (any
    PETL groups in it are dropped); the classification head is always fresh
    because label sets differ between corpora.
    """
    if cfg.init_from is None:
        return SpeakerModel(cfg.backbone, cfg.petl, speakers=speakers, seed=cfg.seed, margin=cfg.margin, scale=cfg.scale)
    src, meta = SpeakerModel.from_checkpoint(cfg.init_from)
    model = SpeakerModel(src.cfg, None, src.backend.cfg, speakers=speakers, seed=cfg.seed, margin=cfg.margin, scale=cfg.scale)
    if src.petl is not None and src.petl.mode not in ("full", "fixed"):
        raise ContractError(f"{cfg.init_from}: cannot re-instrument a checkpoint carrying {src.petl.mode} modules")
    groups = [g for g in src.groups() if g.name.startswith(("backbone.", "backend."))]
    model.load_groups(groups, strict=False)
    from petlsv.petl import apply_petl

    for g in model.groups():
        g.trainable = True
    apply_petl(model.backbone, cfg.petl, seed=cfg.seed)
    return model


def train(cfg: TrainConfig, manifest: Manifest, out_dir=None, ckpt_name="model.ckpt") -> TrainResult:
    speakers = manifest.speakers
    if len(speakers) < 2:
        raise InputError("training manifest needs at least 2 speakers")
    model = build_model(cfg, speakers)
    if cfg.head_init == "class_mean":
        init_head_from_means(model, manifest, cfg.sample_rate)
    rows = fit(model, manifest, cfg)
    path = _write_outputs(out_dir, model, rows, cfg.to_dict(), ckpt_name, final_lr=cfg.lr(cfg.epochs - 1), train=cfg.to_dict())
    return TrainResult(model, rows, path, cfg)


def lm_finetune(ckpt, lm: LmFtConfig, manifest: Manifest, out_dir=None, ckpt_name="lmft.ckpt", base: TrainConfig | None = None) -> TrainResult:
    """Continue training a checkpoint with a larger margin and longer crops at the prior stage's final lr."""
    model, meta = SpeakerModel.from_checkpoint(ckpt)
    if model.head is None or sorted(model.speakers) != manifest.speakers:
        raise InputError("LM-FT must continue on the same speaker set the checkpoint was trained on")
    prior = TrainConfig.from_dict(meta["train"]) if "train" in meta else (base or TrainConfig())
    final_lr = float(meta.get("final_lr", prior.lr(prior.epochs - 1)))
    cfg = replace(
        prior if base is None else base,
        epochs=lm.extra_epochs,
        crop_s=lm.crop_s,
        margin=lm.margin,
        base_lr=final_lr,
        constant_lr=True,
        init_from=str(ckpt),
    )
    model.head.margin = lm.margin
    rows = fit(model, manifest, cfg)
    path = _write_outputs(out_dir, model, rows, cfg.to_dict(), ckpt_name, final_lr=final_lr, train=cfg.to_dict())
    return TrainResult(model, rows, path, cfg)


def two_stage(intermediate: Manifest, target: Manifest, stage2_petl: PetlConfig, cfg1: TrainConfig, cfg2: TrainConfig | None = None, out_dir=None):
    """Full fine-tuning on the intermediate set, then ``stage2_petl`` adaptation on the target set.

    Both stage checkpoints are written under ``out_dir`` (``stage1.ckpt``,
    ``stage2.ckpt``); returns ``(stage1_result, stage2_result)``.
    """
    if out_dir is None:
        raise InputError("two_stage needs an output directory for its stage checkpoints")
    overlap = set(intermediate.speakers) & set(target.speakers)
    if overlap:
        log.warning("stage-2 speakers overlap stage 1: %d shared", len(overlap))
    cfg1 = replace(cfg1, petl=PetlConfig("full"), init_from=None)
    first = train(cfg1, intermediate, out_dir, "stage1.ckpt")
    cfg2 = replace(cfg2 or cfg1, petl=stage2_petl, init_from=str(first.checkpoint))
    second = train(cfg2, target, out_dir, "stage2.ckpt")
    return first, second


def checkpoint_delta(ckpt_a, ckpt_b):
    """Names and total size of groups whose bytes differ between two checkpoints."""
    a = {g.name: g for g in load_checkpoint(ckpt_a)}
    changed, size = [], 0
    for g in load_checkpoint(ckpt_b):
        other = a.get(g.name)
        if other is None or other.data.tobytes() != g.data.tobytes():
            changed.append(g.name)
            size += g.count
    return changed, size
