"""Backbone + back-end + training head bundled behind one parameter list."""

from __future__ import annotations

import numpy as np

from petlsv.backbone import Backbone, BackboneConfig, resolve_config
from petlsv.errors import CheckpointMismatchError
from petlsv.numcore import ops
from petlsv.numcore.checkpoint import load_checkpoint, save_checkpoint
from petlsv.numcore.params import census
from petlsv.numcore.tensor import no_grad
from petlsv.petl import PetlConfig, apply_petl
from petlsv.spkback import AamHead, BackendConfig, MhfaParams, aam_loss, default_backend_config, mhfa_pool


class SpeakerModel:
    def __init__(
        self,
        backbone_cfg="desk",
        petl_cfg: PetlConfig | None = None,
        backend_cfg: BackendConfig | None = None,
        speakers=(),
        seed: int = 0,
        margin: float = 0.2,
        scale: float = 30.0,
    ):
        self.backbone = Backbone(resolve_config(backbone_cfg), seed=seed)
        self.backend = MhfaParams(self.backbone.cfg, backend_cfg, seed=seed)
        self.speakers = list(speakers)
        self.head = AamHead(self.backend.cfg.d_emb, max(len(self.speakers), 1), margin, scale, seed=seed) if self.speakers else None
        self.seed = seed
        if petl_cfg is not None:
            apply_petl(self.backbone, petl_cfg, seed=seed)

    @property
    def petl(self) -> PetlConfig | None:
        return self.backbone.petl

    @property
    def cfg(self) -> BackboneConfig:
        return self.backbone.cfg

    def groups(self, with_head: bool = True):
        out = self.backbone.groups() + self.backend.groups()
        if with_head and self.head is not None:
            out += self.head.groups()
        return out

    def census(self) -> int:
        """Parameters of backbone, PETL modules and back-end (training head excluded)."""
        return census(self.groups(with_head=False))

    def trainable_count(self, with_head: bool = False) -> int:
        return sum(g.count for g in self.groups(with_head) if g.trainable)

    def new_head(self, speakers, margin=0.2, scale=30.0, seed=None):
        self.speakers = list(speakers)
        self.head = AamHead(self.backend.cfg.d_emb, len(self.speakers), margin, scale, seed=self.seed if seed is None else seed)

    # ------------------------------------------------------------ compute

    def embed(self, waveforms):
        return mhfa_pool(self.backbone.encode_layers(waveforms), self.backend)

    def loss(self, waveforms, labels, margin: float | None = None):
        return aam_loss(self.embed(waveforms), labels, self.head, margin)

    def embed_numpy(self, waveform) -> np.ndarray:
        with no_grad():
            return np.asarray(self.embed(np.asarray(waveform)[None]).data[0], dtype=np.float64)

    # ------------------------------------------------------------ persistence

    def meta(self, **extra) -> dict:
        meta = {
            "backbone": self.cfg.to_dict(),
            "petl": self.petl.to_dict() if self.petl else None,
            "backend": self.backend.cfg.to_dict(),
            "speakers": self.speakers,
            "seed": self.seed,
        }
        if self.head is not None:
            meta["margin"] = self.head.margin
            meta["scale"] = self.head.scale
        meta.update(extra)
        return meta

    def save(self, path, **extra):
        save_checkpoint(self.groups(), path, self.meta(**extra))

    def load_groups(self, groups, strict: bool = True, skip_prefixes=()):
        """Copy tensor data and trainable flags from ``groups`` into this model."""
        mine = {g.name: g for g in self.groups()}
        for g in groups:
            if any(g.name.startswith(p) for p in skip_prefixes):
                continue
            dst = mine.get(g.name)
            if dst is None:
                if strict:
                    raise CheckpointMismatchError(f"checkpoint group {g.name!r} not present in model")
                continue
            if dst.data.shape != g.data.shape:
                raise CheckpointMismatchError(
                    f"{g.name}: checkpoint shape {g.data.shape} != model shape {dst.data.shape}"
                )
            dst.tensor.data = g.data.astype(dst.data.dtype, copy=True)
            dst.trainable = g.trainable
        if strict:
            names = {g.name for g in groups if not any(g.name.startswith(p) for p in skip_prefixes)}
            missing = [n for n in mine if n not in names and not any(n.startswith(p) for p in skip_prefixes)]
            if missing:
                raise CheckpointMismatchError(f"checkpoint lacks groups {missing[:5]}")

    @classmethod
    def from_checkpoint(cls, path, expect_backbone=None):
        groups, meta = load_checkpoint(path, with_meta=True)
        try:
            bcfg = BackboneConfig.from_dict(meta["backbone"])
        except (KeyError, TypeError) as exc:
            raise CheckpointMismatchError(f"{path}: checkpoint metadata lacks a backbone config") from exc
        if expect_backbone is not None and resolve_config(expect_backbone) != bcfg:
            raise CheckpointMismatchError(f"{path}: checkpoint backbone {bcfg} differs from expected")
        petl = PetlConfig.from_dict(meta["petl"]) if meta.get("petl") else None
        model = cls(
            bcfg,
            petl,
            BackendConfig.from_dict(meta["backend"]) if meta.get("backend") else default_backend_config(bcfg),
            meta.get("speakers", ()),
            seed=meta.get("seed", 0),
            margin=meta.get("margin", 0.2),
            scale=meta.get("scale", 30.0),
        )
        model.load_groups(groups)
        return model, meta


def layer_weights(model: SpeakerModel):
    """Current softmax layer weightings (keys, values) of the MHFA back-end."""
    with no_grad():
        return (
            ops.softmax_rows(model.backend["a_k"]).data.copy(),
            ops.softmax_rows(model.backend["a_v"]).data.copy(),
        )
