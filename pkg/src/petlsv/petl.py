"""Parameter-efficient transfer learning: bottleneck adapters, prefix tuning, MAM.

The three mechanisms are expressed as hooks attached to backbone blocks by
:func:`apply_petl`.  :func:`count_params` reproduces the trainable budgets
arithmetically from configs alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from petlsv.errors import ContractError, InputError, WiringError
from petlsv.numcore import ops
from petlsv.numcore.params import ParamGroup
from petlsv.numcore.rng import make_rng

MODES = ("full", "fixed", "bottleneck", "prefix", "mam")
INIT_STD = 0.02


@dataclass(frozen=True)
class PetlConfig:
    mode: str = "fixed"
    d_bottleneck: int = 64
    l: int = 40  # noqa: E741
    activation: str = "gelu"
    # "post": adapter wraps the sublayer output after the residual add;
    # "pre": adapter sits on the sublayer branch before the residual add.
    placement: str = "post"

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"unknown PETL mode {self.mode!r}; expected one of {MODES}")
        if self.placement not in ("post", "pre"):
            raise InputError(f"unknown adapter placement {self.placement!r}")
        if self.activation not in ops.ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        if self.uses_adapter and self.d_bottleneck < 1:
            raise InputError("d_bottleneck must be >= 1")
        if self.uses_prefix and self.l < 0:
            raise InputError("prefix length l must be >= 0")

    @property
    def uses_adapter(self) -> bool:
        return self.mode in ("bottleneck", "mam")

    @property
    def uses_prefix(self) -> bool:
        return self.mode in ("prefix", "mam")

    @property
    def freezes_backbone(self) -> bool:
        return self.mode != "full"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))


@dataclass
class AdapterParams:
    """Weights of one bottleneck adapter (down-projection, f, up-projection)."""

    W_down: ParamGroup
    b_down: ParamGroup
    W_up: ParamGroup
    b_up: ParamGroup
    activation: str = "gelu"

    @property
    def groups(self):
        return [self.W_down, self.b_down, self.W_up, self.b_up]

    @classmethod
    def init(cls, prefix: str, d_hidden: int, d_bottleneck: int, rng, activation="gelu", dtype=np.float32):
        return cls(
            ParamGroup(f"{prefix}.W_down", (rng.standard_normal((d_hidden, d_bottleneck)) * INIT_STD).astype(dtype)),
            ParamGroup(f"{prefix}.b_down", np.zeros(d_bottleneck, dtype)),
            ParamGroup(f"{prefix}.W_up", np.zeros((d_bottleneck, d_hidden), dtype)),
            ParamGroup(f"{prefix}.b_up", np.zeros(d_hidden, dtype)),
            activation,
        )


@dataclass
class PrefixParams:
    """Per-head virtual key/value rows for one block, shape (H, l, D_proj)."""

    P_K: ParamGroup
    P_V: ParamGroup

    @property
    def groups(self):
        return [self.P_K, self.P_V]

    @property
    def length(self) -> int:
        return self.P_K.data.shape[-2]

    @classmethod
    def init(cls, prefix: str, n_heads: int, l: int, d_proj: int, rng, dtype=np.float32):  # noqa: E741
        shape = (n_heads, l, d_proj)
        return cls(
            ParamGroup(f"{prefix}.P_K", (rng.standard_normal(shape) * INIT_STD).astype(dtype)),
            ParamGroup(f"{prefix}.P_V", (rng.standard_normal(shape) * INIT_STD).astype(dtype)),
        )


@dataclass
class BlockHooks:
    prefix: PrefixParams | None = None
    serial_mha: AdapterParams | None = None
    serial_ffn: AdapterParams | None = None
    parallel_ffn: AdapterParams | None = None
    placement: str = "post"

    @property
    def groups(self):
        out = []
        for part in (self.prefix, self.serial_mha, self.serial_ffn, self.parallel_ffn):
            if part is not None:
                out.extend(part.groups)
        return out

    @property
    def adapters(self):
        return [a for a in (self.serial_mha, self.serial_ffn, self.parallel_ffn) if a is not None]


# ---------------------------------------------------------------- forward math


def adapter_branch(h, p: AdapterParams):
    """``W_up f(W_down h + b_down) + b_up`` without the residual term."""
    d_hidden = p.W_down.data.shape[0]
    if h.shape[-1] != d_hidden or p.W_up.data.shape[1] != d_hidden:
        raise WiringError(
            f"adapter expects D_hidden={d_hidden} (W_up {p.W_up.data.shape}), got input {h.shape}"
        )
    act = ops.ACTIVATIONS[p.activation]
    z = act(ops.linear(h, p.W_down.tensor, p.b_down.tensor))
    return ops.linear(z, p.W_up.tensor, p.b_up.tensor)


def bottleneck_forward(h, p: AdapterParams):
    """Residual bottleneck adapter: ``h + W_up f(W_down h + b_down) + b_up``."""
    return ops.add(h, adapter_branch(h, p))


def prefix_attention(q, k, v, p_k=None, p_v=None):
    """Scaled dot-product attention with optional prefix keys/values.

    ``q, k, v`` are (..., T, D_proj); ``p_k, p_v`` are (..., l, D_proj) and
    are broadcast over any extra leading axes of ``k``.  Queries are never
    prefixed, so the output has the query length.
    """
    d_proj = q.shape[-1]
    if p_k is not None:
        if p_k.shape[-1] != d_proj or p_v.shape[-1] != d_proj or p_k.shape != p_v.shape:
            raise WiringError(f"prefix shapes {p_k.shape}/{p_v.shape} do not match head dim {d_proj}")
        lead = k.shape[:-2]
        pk = ops.broadcast_to(p_k, lead + p_k.shape[-2:]) if p_k.shape[:-2] != lead else p_k
        pv = ops.broadcast_to(p_v, lead + p_v.shape[-2:]) if p_v.shape[:-2] != lead else p_v
        k = ops.concat([pk, k], axis=-2)
        v = ops.concat([pv, v], axis=-2)
    return ops.attention(q, k, v, 1.0 / math.sqrt(d_proj))


def mam_forward(block, h, p_parallel: AdapterParams, p_prefix: PrefixParams):
    """One block in mix-and-match wiring (prefix attention + parallel FFN adapter)."""
    from petlsv.backbone import block_forward

    return block_forward(block, h, BlockHooks(prefix=p_prefix, parallel_ffn=p_parallel))


# ---------------------------------------------------------------- instrumentation


def apply_petl(model, cfg: PetlConfig, seed: int = 0):
    """Instrument ``model`` (a :class:`~petlsv.backbone.Backbone`) in place.

    Sets backbone trainability per mode and attaches freshly initialised
    adapters/prefixes.  Returns the same model.
    """
    if model.petl is not None:
        raise ContractError(f"model already instrumented with mode {model.petl.mode!r}")
    bcfg = model.cfg
    rng = make_rng(seed, "petl", cfg.mode)
    for g in model.backbone_groups():
        g.trainable = not cfg.freezes_backbone
    for i, block in enumerate(model.blocks):
        hooks = BlockHooks(placement=cfg.placement)
        name = f"petl.block{i}"
        if cfg.mode == "bottleneck":
            hooks.serial_mha = AdapterParams.init(
                f"{name}.adapter_mha", bcfg.d_hidden, cfg.d_bottleneck, rng, cfg.activation
            )
            hooks.serial_ffn = AdapterParams.init(
                f"{name}.adapter_ffn", bcfg.d_hidden, cfg.d_bottleneck, rng, cfg.activation
            )
        if cfg.uses_prefix:
            hooks.prefix = PrefixParams.init(f"{name}.prefix", bcfg.n_heads, cfg.l, bcfg.d_proj, rng)
        if cfg.mode == "mam":
            hooks.parallel_ffn = AdapterParams.init(
                f"{name}.adapter_par", bcfg.d_hidden, cfg.d_bottleneck, rng, cfg.activation
            )
        block.hooks = hooks
    model.petl = cfg
    return model


# ---------------------------------------------------------------- accounting


@dataclass
class ParamReport:
    groups: list = field(default_factory=list)  # (name, count, trainable)
    trainable_petl: int = 0
    trainable_backend: int = 0
    trainable_backbone: int = 0
    frozen_backbone: int = 0

    @property
    def total(self) -> int:
        return sum(c for _, c, _ in self.groups)

    @property
    def trainable(self) -> int:
        return sum(c for _, c, t in self.groups if t)

    @property
    def backbone(self) -> int:
        return self.trainable_backbone + self.frozen_backbone

    @property
    def ratio(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def millions(self, n: int) -> float:
        return round(n / 1e6, 1)

    def summary(self) -> dict:
        return {
            "petl": self.trainable_petl,
            "backend": self.trainable_backend,
            "backbone": self.backbone,
            "trainable_backbone": self.trainable_backbone,
            "frozen_backbone": self.frozen_backbone,
            "trainable": self.trainable,
            "total": self.total,
            "ratio": self.ratio,
            "petl_M": self.millions(self.trainable_petl),
            "backend_M": self.millions(self.trainable_backend),
            "backbone_M": self.millions(self.backbone),
            "total_M": self.millions(self.total),
        }

    def table(self) -> str:
        rows = [
            ("PETL", self.trainable_petl),
            ("backend", self.trainable_backend),
            ("backbone (trainable)", self.trainable_backbone),
            ("backbone (frozen)", self.frozen_backbone),
            ("total", self.total),
        ]
        lines = [f"{'group':<22}{'params':>14}{'M':>8}"]
        lines += [f"{k:<22}{v:>14,d}{v / 1e6:>8.1f}" for k, v in rows]
        lines.append(f"{'trainable ratio':<22}{self.ratio:>22.4f}")
        return "\n".join(lines)


def petl_shapes(bcfg, cfg: PetlConfig):
    """Ordered ``(name, shape)`` list of the PETL parameters for a backbone config."""
    shapes = []
    d, db = bcfg.d_hidden, cfg.d_bottleneck

    def adapter(prefix):
        return [
            (f"{prefix}.W_down", (d, db)),
            (f"{prefix}.b_down", (db,)),
            (f"{prefix}.W_up", (db, d)),
            (f"{prefix}.b_up", (d,)),
        ]

    for i in range(bcfg.n_layers):
        name = f"petl.block{i}"
        if cfg.mode == "bottleneck":
            shapes += adapter(f"{name}.adapter_mha") + adapter(f"{name}.adapter_ffn")
        if cfg.uses_prefix:
            shapes += [
                (f"{name}.prefix.P_K", (bcfg.n_heads, cfg.l, bcfg.d_proj)),
                (f"{name}.prefix.P_V", (bcfg.n_heads, cfg.l, bcfg.d_proj)),
            ]
        if cfg.mode == "mam":
            shapes += adapter(f"{name}.adapter_par")
    return shapes


def count_params(backbone_cfg, petl_cfg: PetlConfig, backend_cfg=None) -> ParamReport:
    """Exact parameter census from configs alone (no tensors allocated).

    ``backbone_cfg`` may be a :class:`BackboneConfig` or a preset name.  The
    back-end defaults to the preset-matched MHFA configuration.
    """
    from petlsv.backbone import backbone_shapes, resolve_config
    from petlsv.spkback import backend_shapes, default_backend_config

    bcfg = resolve_config(backbone_cfg)
    if backend_cfg is None:
        backend_cfg = default_backend_config(bcfg)
    rep = ParamReport()
    frozen = petl_cfg.freezes_backbone
    for name, shape in backbone_shapes(bcfg):
        n = math.prod(shape)
        rep.groups.append((name, n, not frozen))
        if frozen:
            rep.frozen_backbone += n
        else:
            rep.trainable_backbone += n
    for name, shape in petl_shapes(bcfg, petl_cfg):
        n = math.prod(shape)
        rep.groups.append((name, n, True))
        rep.trainable_petl += n
    for name, shape in backend_shapes(bcfg, backend_cfg):
        n = math.prod(shape)
        rep.groups.append((name, n, True))
        rep.trainable_backend += n
    return rep
