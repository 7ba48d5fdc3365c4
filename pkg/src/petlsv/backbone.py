"""Convolutional frontend + pre-norm transformer encoder exposing every layer."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from petlsv.errors import InputError, WiringError
from petlsv.numcore import ops
from petlsv.numcore.params import ParamGroup
from petlsv.numcore.rng import make_rng
from petlsv.numcore.tensor import Tensor
from petlsv.petl import BlockHooks, adapter_branch, bottleneck_forward, prefix_attention

LN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int
    d_hidden: int
    n_heads: int
    d_ffn: int
    frontend: tuple  # ((channels, kernel, stride), ...)
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "frontend", tuple(tuple(int(v) for v in layer) for layer in self.frontend))
        for name in ("n_layers", "d_hidden", "n_heads", "d_ffn"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be positive")
        if self.d_hidden % self.n_heads:
            raise InputError(f"n_heads={self.n_heads} does not divide d_hidden={self.d_hidden}")
        if not self.frontend:
            raise InputError("frontend needs at least one conv layer")
        for c, k, s in self.frontend:
            if c < 1 or s < 1 or k < s:
                raise InputError(f"bad frontend layer (channels={c}, kernel={k}, stride={s}); need kernel >= stride")

    @property
    def d_proj(self) -> int:
        return self.d_hidden // self.n_heads

    @property
    def total_stride(self) -> int:
        return math.prod(s for _, _, s in self.frontend)

    @property
    def receptive_field(self) -> int:
        r, jump = 1, 1
        for _, k, s in self.frontend:
            r += (k - 1) * jump
            jump *= s
        return r

    def n_frames(self, n_samples: int) -> int:
        """Frames produced for ``n_samples``: floor division by each stride in turn."""
        t = n_samples
        for _, _, s in self.frontend:
            t //= s
        return t

    def to_dict(self):
        d = asdict(self)
        d["frontend"] = [list(x) for x in self.frontend]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))


_W2V_FRONTEND = ((512, 10, 5),) + ((512, 5, 2),) * 4 + ((512, 3, 2),) * 2

PRESETS = {
    "base": BackboneConfig(12, 768, 12, 3072, _W2V_FRONTEND),
    "large": BackboneConfig(24, 1024, 16, 4096, _W2V_FRONTEND),
    "desk": BackboneConfig(4, 64, 4, 256, ((32, 8, 4), (64, 8, 4), (64, 4, 2))),
}


def resolve_config(cfg) -> BackboneConfig:
    if isinstance(cfg, BackboneConfig):
        return cfg
    if isinstance(cfg, str):
        try:
            return PRESETS[cfg]
        except KeyError:
            raise InputError(f"unknown backbone preset {cfg!r}; choose from {sorted(PRESETS)}") from None
    return BackboneConfig.from_dict(dict(cfg))


def backbone_shapes(cfg: BackboneConfig):
    """Ordered ``(name, shape)`` list of every backbone parameter."""
    shapes = []
    cin = 1
    for i, (c, k, _) in enumerate(cfg.frontend):
        shapes += [(f"backbone.frontend.conv{i}.W", (k, cin, c)), (f"backbone.frontend.conv{i}.b", (c,))]
        cin = c
    d, f = cfg.d_hidden, cfg.d_ffn
    shapes += [
        ("backbone.frontend.ln.g", (cin,)),
        ("backbone.frontend.ln.b", (cin,)),
        ("backbone.frontend.proj.W", (cin, d)),
        ("backbone.frontend.proj.b", (d,)),
    ]
    for i in range(cfg.n_layers):
        p = f"backbone.block{i}"
        shapes += [(f"{p}.ln1.g", (d,)), (f"{p}.ln1.b", (d,))]
        for w in "QKVO":
            shapes += [(f"{p}.attn.W_{w}", (d, d)), (f"{p}.attn.b_{w}", (d,))]
        shapes += [
            (f"{p}.ln2.g", (d,)),
            (f"{p}.ln2.b", (d,)),
            (f"{p}.ffn.W_1", (d, f)),
            (f"{p}.ffn.b_1", (f,)),
            (f"{p}.ffn.W_2", (f, d)),
            (f"{p}.ffn.b_2", (d,)),
        ]
    return shapes


def _init_value(name: str, shape, rng, n_layers: int):
    leaf = name.rsplit(".", 1)[1]
    if leaf == "g":
        return np.ones(shape)
    if leaf.startswith("b"):
        return np.zeros(shape)
    if len(shape) == 3:  # conv (kernel, C_in, C_out)
        return rng.standard_normal(shape) * math.sqrt(2.0 / (shape[0] * shape[1]))
    std = 1.0 / math.sqrt(shape[0])
    if leaf in ("W_O", "W_2"):
        std /= math.sqrt(2.0 * n_layers)
    return rng.standard_normal(shape) * std


class Block:
    """Parameters of one transformer block plus any attached PETL hooks."""

    def __init__(self, index: int, params: dict, n_heads: int = 1):
        self.index = index
        self.n_heads = n_heads
        pre = f"backbone.block{index}."
        self.p = {k[len(pre) :]: v.tensor for k, v in params.items() if k.startswith(pre)}
        self.hooks = BlockHooks()

    @property
    def d_hidden(self):
        return self.p["attn.W_Q"].shape[0]


def attention(block: Block, x, n_heads: int, prefix=None):
    p = block.p
    bsz, t, d = x.shape
    dp = d // n_heads

    def heads(w):
        y = ops.linear(x, p[f"attn.W_{w}"], p[f"attn.b_{w}"])
        return ops.transpose(ops.reshape(y, (bsz, t, n_heads, dp)), (0, 2, 1, 3))

    q, k, v = heads("Q"), heads("K"), heads("V")
    if prefix is not None:
        if prefix.P_K.data.shape[0] != n_heads:
            raise WiringError(f"prefix has {prefix.P_K.data.shape[0]} heads, block has {n_heads}")
        o = prefix_attention(q, k, v, prefix.P_K.tensor, prefix.P_V.tensor)
    else:
        o = prefix_attention(q, k, v)
    o = ops.reshape(ops.transpose(o, (0, 2, 1, 3)), (bsz, t, d))
    return ops.linear(o, p["attn.W_O"], p["attn.b_O"])


def block_forward(block: Block, h, hooks: BlockHooks | None = None, n_heads: int | None = None, activation="gelu"):
    """Pre-norm block ``H' = H + MHA(LN(H))``, ``out = H' + FFN(LN(H'))`` plus hooks.

    ``h`` is (B, T, D_hidden) or (T, D_hidden).
    """
    hooks = block.hooks if hooks is None else hooks
    squeeze = h.ndim == 2
    if squeeze:
        h = ops.reshape(h, (1,) + h.shape)
    if h.shape[-1] != block.d_hidden:
        raise WiringError(f"block{block.index} expects D_hidden={block.d_hidden}, got {h.shape}")
    if n_heads is None:
        n_heads = block.n_heads
    p = block.p
    act = ops.ACTIVATIONS[activation]

    x = ops.layer_norm(h, p["ln1.g"], p["ln1.b"], LN_EPS)
    a = attention(block, x, n_heads, hooks.prefix)
    if hooks.serial_mha is not None and hooks.placement == "pre":
        a = bottleneck_forward(a, hooks.serial_mha)
    h1 = ops.add(h, a)
    if hooks.serial_mha is not None and hooks.placement == "post":
        h1 = bottleneck_forward(h1, hooks.serial_mha)

    x2 = ops.layer_norm(h1, p["ln2.g"], p["ln2.b"], LN_EPS)
    f = ops.linear(act(ops.linear(x2, p["ffn.W_1"], p["ffn.b_1"])), p["ffn.W_2"], p["ffn.b_2"])
    if hooks.serial_ffn is not None and hooks.placement == "pre":
        f = bottleneck_forward(f, hooks.serial_ffn)
    out = ops.add(h1, f)
    if hooks.parallel_ffn is not None:
        out = ops.add(out, adapter_branch(x2, hooks.parallel_ffn))
    if hooks.serial_ffn is not None and hooks.placement == "post":
        out = bottleneck_forward(out, hooks.serial_ffn)
    if squeeze:
        out = ops.reshape(out, out.shape[1:])
    return out


class Backbone:
    """Frontend + ``n_layers`` transformer blocks with named parameter groups."""

    def __init__(self, cfg, seed: int = 0, dtype=np.float32):
        self.cfg = resolve_config(cfg)
        rng = make_rng(seed, "backbone")
        self.params = {}
        for name, shape in backbone_shapes(self.cfg):
            value = _init_value(name, shape, rng, self.cfg.n_layers).astype(dtype)
            self.params[name] = ParamGroup(name, value, trainable=True)
        self.blocks = [Block(i, self.params, self.cfg.n_heads) for i in range(self.cfg.n_layers)]
        self.petl = None

    def backbone_groups(self):
        return list(self.params.values())

    def petl_groups(self):
        out = []
        for b in self.blocks:
            out.extend(b.hooks.groups)
        return out

    def groups(self):
        return self.backbone_groups() + self.petl_groups()

    def frontend_encode(self, waveform):
        return frontend_encode(self, waveform)

    def encode_layers(self, waveform):
        return encode_layers(self, waveform)


def frontend_encode(model: Backbone, waveform):
    """Waveform (N,) or (B, N) -> frame features (B, T, D_hidden)."""
    cfg = model.cfg
    w = waveform.data if isinstance(waveform, Tensor) else np.asarray(waveform)
    if w.ndim == 1:
        w = w[None]
    n = w.shape[-1]
    if n < cfg.receptive_field:
        raise InputError(f"waveform has {n} samples; frontend needs at least {cfg.receptive_field}")
    dtype = model.params["backbone.frontend.proj.W"].data.dtype
    x = Tensor(w[..., None].astype(dtype, copy=False))
    p = model.params
    act = ops.ACTIVATIONS[cfg.activation]
    for i, (_, _, s) in enumerate(cfg.frontend):
        x = act(ops.conv1d(x, p[f"backbone.frontend.conv{i}.W"].tensor, p[f"backbone.frontend.conv{i}.b"].tensor, s))
    x = ops.layer_norm(x, p["backbone.frontend.ln.g"].tensor, p["backbone.frontend.ln.b"].tensor, LN_EPS)
    return ops.linear(x, p["backbone.frontend.proj.W"].tensor, p["backbone.frontend.proj.b"].tensor)


def encode_layers(model: Backbone, waveform):
    """Frontend output followed by each block's output: ``n_layers + 1`` tensors."""
    h = frontend_encode(model, waveform)
    outs = [h]
    for block in model.blocks:
        h = block_forward(block, h, n_heads=model.cfg.n_heads, activation=model.cfg.activation)
        outs.append(h)
    return outs
