"""Speaker extractor back-end: MHFA pooling, AAM-softmax head, cosine scoring.

MHFA (multi-head factorized attentive pooling) here is a reconstruction:
separate softmax layer weightings for keys and values, a shared compression
to ``d_cmp`` dims, ``n_heads`` attention vectors over frames, and a linear
map of the concatenated head outputs to the embedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from petlsv.errors import InputError
from petlsv.numcore import ops
from petlsv.numcore.params import ParamGroup
from petlsv.numcore.rng import make_rng
from petlsv.numcore.tensor import Tensor


@dataclass(frozen=True)
class BackendConfig:
    d_cmp: int = 128
    n_heads: int = 64
    d_emb: int = 256

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


DESK_BACKEND = BackendConfig(d_cmp=32, n_heads=4, d_emb=32)


def default_backend_config(bcfg) -> BackendConfig:
    return DESK_BACKEND if bcfg.d_hidden < 256 else BackendConfig()


def backend_shapes(bcfg, cfg: BackendConfig):
    n_layers = bcfg.n_layers + 1
    return [
        ("backend.mhfa.a_k", (n_layers,)),
        ("backend.mhfa.a_v", (n_layers,)),
        ("backend.mhfa.W_k", (bcfg.d_hidden, cfg.d_cmp)),
        ("backend.mhfa.W_v", (bcfg.d_hidden, cfg.d_cmp)),
        ("backend.mhfa.U", (cfg.n_heads, cfg.d_cmp)),
        ("backend.mhfa.W_o", (cfg.n_heads * cfg.d_cmp, cfg.d_emb)),
    ]


class MhfaParams:
    def __init__(self, bcfg, cfg: BackendConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or default_backend_config(bcfg)
        rng = make_rng(seed, "backend")
        self.params = {}
        for name, shape in backend_shapes(bcfg, self.cfg):
            leaf = name.rsplit(".", 1)[1]
            if leaf in ("a_k", "a_v"):
                value = np.zeros(shape)
            else:
                value = rng.standard_normal(shape) / math.sqrt(shape[-1] if leaf == "U" else shape[0])
            self.params[name] = ParamGroup(name, value.astype(dtype))

    def __getitem__(self, leaf):
        return self.params[f"backend.mhfa.{leaf}"].tensor

    def groups(self):
        return list(self.params.values())


def mhfa_pool(layers, p: MhfaParams):
    """Layer outputs (each (B, T, D) or (T, D)) -> embeddings (B, D_emb) or (D_emb,)."""
    layers = list(layers)
    squeeze = layers[0].ndim == 2
    if squeeze:
        layers = [ops.reshape(x, (1,) + x.shape) for x in layers]
    bsz, t, _ = layers[0].shape
    if t == 0:
        raise InputError("mhfa_pool: sequence has no frames")
    n = len(layers)
    w_k = ops.reshape(ops.softmax_rows(ops.reshape(p["a_k"], (1, n))), (n,))
    w_v = ops.reshape(ops.softmax_rows(ops.reshape(p["a_v"], (1, n))), (n,))
    k = ops.linear(ops.mix(layers, w_k), p["W_k"])  # (B, T, C)
    v = ops.linear(ops.mix(layers, w_v), p["W_v"])
    logits = ops.matmul(k, ops.transpose(p["U"], (1, 0)))  # (B, T, H)
    alpha = ops.softmax_rows(ops.transpose(logits, (0, 2, 1)))  # (B, H, T)
    pooled = ops.matmul(alpha, v)  # (B, H, C)
    h, c = pooled.shape[1], pooled.shape[2]
    emb = ops.linear(ops.reshape(pooled, (bsz, h * c)), p["W_o"])
    if squeeze:
        emb = ops.reshape(emb, (emb.shape[-1],))
    return emb


class AamHead:
    """Class-weight matrix (D_emb, n_speakers) with additive angular margin."""

    def __init__(self, d_emb: int, n_speakers: int, margin: float = 0.2, scale: float = 30.0, seed: int = 0, dtype=np.float32):
        if not 0.0 <= margin < math.pi / 2:
            raise InputError(f"margin {margin} outside [0, pi/2)")
        if scale <= 0:
            raise InputError("scale must be positive")
        rng = make_rng(seed, "aam_head", n_speakers)
        value = (rng.standard_normal((d_emb, n_speakers)) / math.sqrt(d_emb)).astype(dtype)
        self.C = ParamGroup("head.C", value)
        self.margin = margin
        self.scale = scale

    @property
    def n_speakers(self):
        return self.C.data.shape[1]

    def groups(self):
        return [self.C]


def cosine_matrix(embeddings, C):
    """Cosines between each embedding row and each (normalised) class column."""
    return ops.matmul(ops.l2_normalize(embeddings, axis=-1), ops.l2_normalize(C, axis=0))


def aam_loss(embeddings, labels, head: AamHead, margin: float | None = None):
    """Mean AAM-softmax cross-entropy over a batch (B, D_emb)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= head.n_speakers:
        raise InputError(f"labels must lie in [0, {head.n_speakers}); got range [{labels.min()}, {labels.max()}]")
    m = head.margin if margin is None else margin
    cos = cosine_matrix(embeddings, head.C.tensor)
    return ops.cross_entropy(ops.aam_logits(cos, labels, m, head.scale), labels)


def cosine_score(e1, e2) -> float:
    a = np.asarray(e1.data if isinstance(e1, Tensor) else e1, dtype=np.float64).reshape(-1)
    b = np.asarray(e2.data if isinstance(e2, Tensor) else e2, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InputError("cosine_score: zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def write_embeddings(path, items) -> None:
    """Write ``(utt_id, vector)`` pairs as JSON lines ``{"utt_id", "vector"}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt, vec in items:
            fh.write(json.dumps({"utt_id": utt, "vector": [float(x) for x in np.asarray(vec).ravel()]}) + "\n")


def read_embeddings(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[row["utt_id"]] = np.asarray(row["vector"], dtype=np.float64)
    return out
