"""Deterministic synthetic speaker corpora with a controllable domain shift.

A speaker is a 16-tap FIR "vocal tract" plus a fundamental frequency.
Domain A excites the filter with a jittered pulse train, domain B with a
tilted sawtooth, so the same speaker model transfers imperfectly between
them.  Everything is derived from integer seeds; no OS entropy is used.
"""

from __future__ import annotations

import itertools
import json
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from petlsv.errors import InputError
from petlsv.numcore.rng import make_rng

SAMPLE_RATE = 16000
N_TAPS = 16
PEAK = 0.9


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    fir: np.ndarray
    f0: float
    domain: str

    @classmethod
    def derive(cls, corpus_seed: int, speaker_id: str, domain: str):
        if domain not in ("A", "B"):
            raise InputError(f"domain must be 'A' or 'B', got {domain!r}")
        rng = make_rng(corpus_seed, "speaker", speaker_id, domain)
        decay = rng.uniform(2.0, 6.0)
        fir = rng.standard_normal(N_TAPS) * np.exp(-np.arange(N_TAPS) / decay)
        fir /= np.linalg.norm(fir)
        f0 = float(rng.uniform(80.0, 300.0))
        return cls(speaker_id, fir, f0, domain)


def synth_utterance(profile: SpeakerProfile, utt_seed: int, duration_s: float, sample_rate: int = SAMPLE_RATE):
    if duration_s < 0.5:
        raise InputError(f"duration {duration_s}s below the 0.5s minimum")
    rng = make_rng(utt_seed, "utterance", profile.speaker_id, profile.domain)
    n = int(round(duration_s * sample_rate))
    f0 = profile.f0 * np.exp(rng.normal(0.0, 0.04))
    fir = profile.fir + 0.08 * rng.standard_normal(N_TAPS) * np.abs(profile.fir).mean()

    period = sample_rate / f0
    steps = period * (1.0 + 0.02 * rng.standard_normal(int(n / period) + 2))
    if profile.domain == "A":
        exc = np.zeros(n)
        pos = np.cumsum(steps) - rng.uniform(0, period)
        pos = pos[(pos >= 0) & (pos < n)].astype(np.int64)
        exc[pos] = 1.0 + 0.1 * rng.standard_normal(pos.size)
    else:
        # sawtooth phase advances by one per (jittered) period
        idx = np.minimum((np.arange(n) / period).astype(np.int64), steps.size - 1)
        phase = np.arange(n) / steps[idx] + rng.uniform()
        exc = 2.0 * (phase - np.floor(phase)) - 1.0
        exc = lfilter([1.0], [1.0, -0.85], exc)  # spectral tilt
        exc = np.diff(exc, prepend=0.0)
    exc_rms = np.sqrt(np.mean(exc**2)) + 1e-12
    exc = exc + 0.15 * exc_rms * rng.standard_normal(n)
    y = lfilter(fir, [1.0], exc)
    y *= rng.uniform(0.3, 1.0)
    peak = np.abs(y).max()
    return (y * (PEAK / peak)).astype(np.float32) if peak > 0 else y.astype(np.float32)


# ---------------------------------------------------------------- augmentation


def _noise(n: int, rng, color: str):
    white = rng.standard_normal(n)
    if color == "white":
        return white
    spec = np.fft.rfft(white)
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n)


def add_noise(waveform, snr_db: float, rng, color: str = "white"):
    """Add white or pink noise scaled to an exact signal-to-noise ratio."""
    x = np.asarray(waveform, dtype=np.float64)
    noise = _noise(x.size, rng, color)
    p_sig = np.mean(x**2)
    p_noise = np.mean(noise**2)
    if p_sig == 0 or p_noise == 0:
        return x.copy()
    noise *= np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return x + noise


def reverb(waveform, rng, max_taps: int = 64, decay_range=(0.3, 0.9)):
    """Convolve with a random exponentially decaying FIR (first tap 1)."""
    n_taps = int(rng.integers(2, max_taps + 1))
    decay = rng.uniform(*decay_range)
    h = decay ** np.arange(n_taps) * rng.standard_normal(n_taps)
    h[0] = 1.0
    return lfilter(h, [1.0], np.asarray(waveform, dtype=np.float64))


def augment(waveform, rng, prob: float = 0.6, snr_range=(5.0, 20.0)):
    """Noise then reverberation, applied with probability ``prob``; peak kept <= 1."""
    x = np.asarray(waveform, dtype=np.float32)
    if rng.random() >= prob:
        return x.copy()
    color = "white" if rng.random() < 0.5 else "pink"
    y = add_noise(x, rng.uniform(*snr_range), rng, color)
    y = reverb(y, rng)
    peak = np.abs(y).max()
    if peak > 0:
        y *= PEAK / peak
    return y.astype(np.float32)


def measure_snr(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - clean
    return float(10.0 * np.log10(np.mean(clean**2) / np.mean(noise**2)))


# ---------------------------------------------------------------- corpora


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    speaker_id: str
    domain: str
    corpus_seed: int
    utt_seed: int
    duration_s: float
    path: str | None = None

    def load(self, sample_rate: int = SAMPLE_RATE):
        if self.path:
            return read_wav(self.path)
        profile = SpeakerProfile.derive(self.corpus_seed, self.speaker_id, self.domain)
        return synth_utterance(profile, self.utt_seed, self.duration_s, sample_rate)


class Manifest(list):
    """List of :class:`Utterance` rows with JSON-lines I/O."""

    @property
    def speakers(self):
        return sorted({u.speaker_id for u in self})

    def by_id(self):
        return {u.utt_id: u for u in self}

    def validate(self):
        ids = [u.utt_id for u in self]
        if len(set(ids)) != len(ids):
            raise InputError("manifest has duplicate utt_ids")
        counts = {}
        for u in self:
            counts[u.speaker_id] = counts.get(u.speaker_id, 0) + 1
        thin = [s for s, c in counts.items() if c < 2]
        if thin:
            raise InputError(f"speakers with fewer than 2 utterances: {thin[:5]}")
        return self

    def write(self, path):
        """Write JSON lines; WAV paths are stored relative to the manifest's folder when possible."""
        base = Path(path).resolve().parent
        with open(path, "w", encoding="utf-8") as fh:
            for u in self:
                row = asdict(u)
                if u.path:
                    p = Path(u.path).resolve()
                    row["path"] = str(p.relative_to(base)) if p.is_relative_to(base) else str(p)
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        rows = cls()
        try:
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        if row.get("path") and not Path(row["path"]).is_absolute():
                            row["path"] = str(Path(path).parent / row["path"])
                        rows.append(Utterance(**row))
        except OSError as exc:
            raise InputError(f"cannot read manifest {path}: {exc}") from exc
        return rows


def speaker_name(domain: str, index: int) -> str:
    return f"{domain}{index:04d}"


def make_corpus(
    corpus_seed: int,
    n_speakers: int,
    utts_per_speaker: int,
    domain: str,
    duration_s: float = 1.0,
    speaker_offset: int = 0,
    out_dir=None,
) -> Manifest:
    """Build a manifest; with ``out_dir`` also write 16-bit WAVs and ``manifest.jsonl``."""
    if n_speakers < 2:
        raise InputError("need at least 2 speakers")
    if utts_per_speaker < 2:
        raise InputError("need at least 2 utterances per speaker")
    rows = Manifest()
    for s in range(speaker_offset, speaker_offset + n_speakers):
        spk = speaker_name(domain, s)
        for u in range(utts_per_speaker):
            seed = int(make_rng(corpus_seed, "utt_seed", spk, u).integers(0, 2**63 - 1))
            rows.append(Utterance(f"{spk}-{u:03d}", spk, domain, corpus_seed, seed, duration_s))
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            written = Manifest()
            for u in rows:
                path = out / f"{u.utt_id}.wav"
                write_wav(path, u.load())
                written.append(Utterance(**{**asdict(u), "path": str(path)}))
            written.write(out / "manifest.jsonl")
        except OSError as exc:
            raise InputError(f"writing corpus under {out}: {exc}") from exc
        rows = written
    return rows.validate()


def make_trials(manifest: Manifest, seed: int = 0):
    """All same-speaker pairs plus an equal number of random different-speaker pairs.

    Returns rows ``(label, enroll_utt, test_utt)`` with label 1 for target.
    """
    by_spk = {}
    for u in manifest:
        by_spk.setdefault(u.speaker_id, []).append(u.utt_id)
    targets = [
        (1, a, b) for utts in by_spk.values() for a, b in itertools.combinations(utts, 2)
    ]
    ids = [u.utt_id for u in manifest]
    spk = {u.utt_id: u.speaker_id for u in manifest}
    rng = make_rng(seed, "trials")
    non, seen = [], set()
    while len(non) < len(targets):
        i, j = rng.integers(0, len(ids), size=2)
        a, b = ids[i], ids[j]
        if spk[a] == spk[b] or (a, b) in seen or (b, a) in seen:
            continue
        seen.add((a, b))
        non.append((0, a, b))
    return targets + non


def write_trials(path, trials) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for label, a, b in trials:
            fh.write(f"{label} {a} {b}\n")


def read_trials(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                rows.append((int(parts[0]), parts[1], parts[2]))
    return rows


def write_wav(path, waveform, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(waveform) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path):
    try:
        with wave.open(str(path), "rb") as fh:
            raw = fh.readframes(fh.getnframes())
    except (OSError, wave.Error) as exc:
        raise InputError(f"cannot read wav {path}: {exc}") from exc
    return (np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0)


@dataclass
class DeskCorpora:
    intermediate: Manifest
    target: Manifest
    eval_a: Manifest
    eval_b: Manifest
    trials_a: list
    trials_b: list


def default_corpora(seed: int = 0, duration_s: float = 1.0) -> DeskCorpora:
    """Desk-scale stand-ins: 64x20 domain-A intermediate set, 16x10 domain-B target,
    and 16x10 held-out evaluation speakers per domain with trial lists."""
    inter = make_corpus(seed, 64, 20, "A", duration_s)
    target = make_corpus(seed, 16, 10, "B", duration_s)
    eval_a = make_corpus(seed, 16, 10, "A", duration_s, speaker_offset=1000)
    eval_b = make_corpus(seed, 16, 10, "B", duration_s, speaker_offset=1000)
    return DeskCorpora(inter, target, eval_a, eval_b, make_trials(eval_a, seed), make_trials(eval_b, seed))
