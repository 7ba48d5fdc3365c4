"""Trial scoring and detection metrics (EER, normalised minDCF)."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from petlsv.errors import InputError


@dataclass(frozen=True)
class DcfParams:
    p_tar: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_tar < 1:
            raise InputError("p_tar must lie in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise InputError("costs must be positive")


DCF_P01 = DcfParams(0.01)
DCF_P05 = DcfParams(0.05)


@dataclass
class ScoreSet:
    scores: np.ndarray
    is_target: np.ndarray
    pairs: list | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.is_target = np.asarray(self.is_target, dtype=bool).reshape(-1)
        if self.scores.size == 0 or self.scores.size != self.is_target.size:
            raise InputError("score set must be nonempty with one label per score")
        if not np.isfinite(self.scores).all():
            raise InputError("score set contains non-finite scores")

    @property
    def n_target(self) -> int:
        return int(self.is_target.sum())

    @property
    def n_nontarget(self) -> int:
        return int((~self.is_target).sum())

    def _check(self):
        if self.n_target == 0 or self.n_nontarget == 0:
            raise InputError("need at least one target and one nontarget score")

    def write(self, path):
        if self.pairs is None:
            raise InputError("score set has no trial pairs to write")
        with open(path, "w", encoding="utf-8") as fh:
            for (a, b), s in zip(self.pairs, self.scores):
                fh.write(f"{a} {b} {s:.8f}\n")


def error_rates(s: ScoreSet):
    """Thresholds (distinct scores, then +inf) with P_miss(t) = P(tar < t), P_fa(t) = P(non >= t)."""
    s._check()
    tar = np.sort(s.scores[s.is_target])
    non = np.sort(s.scores[~s.is_target])
    thr = np.append(np.unique(s.scores), np.inf)
    p_miss = np.searchsorted(tar, thr, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    return thr, p_miss, p_fa


def compute_eer(s: ScoreSet) -> float:
    """EER at the crossing of miss and false-alarm rates, linearly interpolated."""
    _, p_miss, p_fa = error_rates(s)
    i = int(np.argmax(p_miss >= p_fa))
    if p_miss[i] == p_fa[i] or i == 0:
        return float(p_miss[i])
    dm = p_miss[i] - p_miss[i - 1]
    df = p_fa[i] - p_fa[i - 1]
    alpha = (p_fa[i - 1] - p_miss[i - 1]) / (dm - df)
    return float(p_miss[i - 1] + alpha * dm)


def compute_min_dcf(s: ScoreSet, p: DcfParams = DCF_P01) -> float:
    _, p_miss, p_fa = error_rates(s)
    p_miss = np.append(0.0, p_miss)  # threshold -inf accepts everything
    p_fa = np.append(1.0, p_fa)
    cost = p.c_miss * p.p_tar * p_miss + p.c_fa * (1 - p.p_tar) * p_fa
    return float(cost.min() / min(p.c_miss * p.p_tar, p.c_fa * (1 - p.p_tar)))


def metrics_report(s: ScoreSet) -> dict:
    return {
        "eer": compute_eer(s),
        "min_dcf_p01": compute_min_dcf(s, DCF_P01),
        "min_dcf_p05": compute_min_dcf(s, DCF_P05),
        "n_target": s.n_target,
        "n_nontarget": s.n_nontarget,
    }


def embed_manifest(model, manifest, utt_ids=None) -> dict:
    """One embedding per utterance over the whole (uncropped) waveform."""
    rows = manifest.by_id()
    wanted = list(rows) if utt_ids is None else list(dict.fromkeys(utt_ids))
    out = {}
    for utt in wanted:
        if utt not in rows:
            raise InputError(f"utterance {utt!r} not found in manifest")
        out[utt] = model.embed_numpy(rows[utt].load())
    return out


def score_embeddings(embeddings: dict, trials) -> ScoreSet:
    scores, labels, pairs = [], [], []
    for label, a, b in trials:
        for u in (a, b):
            if u not in embeddings:
                raise InputError(f"utterance {u!r} has no embedding")
        ea, eb = embeddings[a], embeddings[b]
        scores.append(float(ea @ eb / (np.linalg.norm(ea) * np.linalg.norm(eb))))
        labels.append(int(label) == 1)
        pairs.append((a, b))
    return ScoreSet(np.array(scores), np.array(labels), pairs)


def score_trials(model, manifest, trials) -> ScoreSet:
    if isinstance(model, (str, bytes)) or hasattr(model, "__fspath__"):
        from petlsv.model import SpeakerModel

        model, _ = SpeakerModel.from_checkpoint(model)
    needed = [u for _, a, b in trials for u in (a, b)]
    known = manifest.by_id()
    for u in needed:
        if u not in known:
            raise InputError(f"utterance {u!r} not found in manifest")
    return score_embeddings(embed_manifest(model, manifest, needed), trials)


def evaluate(model, manifest, trials) -> dict:
    return metrics_report(score_trials(model, manifest, trials))


def write_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
