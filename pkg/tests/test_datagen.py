import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petlsv.datagen import (
    PEAK,
    Manifest,
    SpeakerProfile,
    Utterance,
    add_noise,
    augment,
    make_corpus,
    make_trials,
    measure_snr,
    read_trials,
    read_wav,
    synth_utterance,
    write_trials,
)
from petlsv.errors import InputError
from petlsv.numcore import make_rng


def profile(spk="A0001", domain="A", seed=0):
    return SpeakerProfile.derive(seed, spk, domain)


def test_profile_is_deterministic_and_in_range():
    a, b = profile(), profile()
    assert np.array_equal(a.fir, b.fir) and a.f0 == b.f0
    assert a.fir.shape == (16,) and 80 <= a.f0 <= 300
    assert not np.array_equal(profile(domain="B").fir, a.fir)
    with pytest.raises(InputError):
        profile(domain="C")


def test_same_seeds_bit_identical():
    assert np.array_equal(synth_utterance(profile(), 7, 1.0), synth_utterance(profile(), 7, 1.0))


def test_speakers_differ_for_same_utt_seed():
    a = synth_utterance(profile("A0001"), 3, 1.0)
    b = synth_utterance(profile("A0002"), 3, 1.0)
    assert np.abs(a - b).max() > 0.01


@pytest.mark.parametrize("domain", ["A", "B"])
def test_waveform_contract(domain):
    w = synth_utterance(profile(domain=domain), 1, 0.5)
    assert w.dtype == np.float32 and w.shape == (8000,)
    assert np.abs(w).max() == pytest.approx(PEAK, abs=1e-6)


def test_minimum_duration():
    with pytest.raises(InputError):
        synth_utterance(profile(), 0, 0.4)


def log_spectrum(w, n_fft=512):
    frames = np.lib.stride_tricks.sliding_window_view(w, n_fft)[:: n_fft // 2]
    spec = np.abs(np.fft.rfft(frames * np.hanning(n_fft), axis=1)) ** 2
    return np.log(spec.mean(0) + 1e-8)


def test_linear_probe_separates_ten_speakers():
    # probe oracle: ridge regression from average log-spectra to one-hot speaker codes
    man = make_corpus(11, 10, 15, "A", 1.0)
    X = np.stack([log_spectrum(u.load()) for u in man])
    y = np.array([man.speakers.index(u.speaker_id) for u in man])
    test = np.array([int(u.utt_id[-3:]) >= 10 for u in man])
    mu, sd = X[~test].mean(0), X[~test].std(0) + 1e-6
    Z = np.hstack([(X - mu) / sd, np.ones((len(X), 1))])
    Y = np.eye(10)[y]
    W = np.linalg.solve(Z[~test].T @ Z[~test] + 1.0 * np.eye(Z.shape[1]), Z[~test].T @ Y[~test])
    acc = np.mean(np.argmax(Z[test] @ W, 1) == y[test])
    assert acc > 0.8


# ---------------------------------------------------------------- augmentation


@pytest.mark.parametrize("snr", [5.0, 20.0])
@pytest.mark.parametrize("color", ["white", "pink"])
def test_requested_snr_is_measured(snr, color):
    clean = synth_utterance(profile(), 2, 1.0).astype(np.float64)
    noisy = add_noise(clean, snr, make_rng(0, "snr", snr), color)
    assert abs(measure_snr(clean, noisy) - snr) <= 1.0


def test_probability_zero_is_identity():
    w = synth_utterance(profile(), 4, 0.5)
    rng = make_rng(1)
    for _ in range(5):
        assert np.array_equal(augment(w, rng, prob=0.0), w)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_augmented_peak_bounded(seed):
    w = synth_utterance(profile(), seed % 50, 0.5)
    out = augment(w, make_rng(seed), prob=1.0)
    assert out.shape == w.shape and np.isfinite(out).all()
    assert np.abs(out).max() <= 1.0


def test_augmentation_rate_near_prob():
    w = synth_utterance(profile(), 4, 0.5)
    rng = make_rng(5)
    changed = sum(not np.array_equal(augment(w, rng), w) for _ in range(400))
    assert 0.5 < changed / 400 < 0.7


# ---------------------------------------------------------------- corpora


def test_tiny_corpus_has_four_rows():
    man = make_corpus(0, 2, 2, "A", 0.5)
    assert len(man) == 4 and len(man.speakers) == 2
    assert len({u.utt_id for u in man}) == 4


def test_corpus_preconditions():
    with pytest.raises(InputError):
        make_corpus(0, 1, 4, "A")
    with pytest.raises(InputError):
        make_corpus(0, 2, 1, "A")


def digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


def test_regeneration_is_byte_identical(tmp_path):
    make_corpus(3, 3, 2, "B", 0.5, out_dir=tmp_path / "a")
    make_corpus(3, 3, 2, "B", 0.5, out_dir=tmp_path / "b")
    da, db = digest(tmp_path / "a"), digest(tmp_path / "b")
    assert list(da.values()) == list(db.values()) and len(da) == 7


def test_written_corpus_reloads(tmp_path):
    man = make_corpus(3, 2, 2, "A", 0.5, out_dir=tmp_path)
    back = Manifest.read(tmp_path / "manifest.jsonl")
    assert [u.utt_id for u in back] == [u.utt_id for u in man]
    w = read_wav(back[0].path)
    np.testing.assert_allclose(w, synth_utterance(SpeakerProfile.derive(3, back[0].speaker_id, "A"), back[0].utt_seed, 0.5), atol=1.0 / 32767)


def test_write_failure_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(InputError, match="file"):
        make_corpus(0, 2, 2, "A", 0.5, out_dir=blocker / "sub")


def test_manifest_validation():
    rows = Manifest([Utterance("x", "s1", "A", 0, 1, 1.0), Utterance("x", "s1", "A", 0, 2, 1.0)])
    with pytest.raises(InputError):
        rows.validate()
    with pytest.raises(InputError):
        Manifest([Utterance("x", "s1", "A", 0, 1, 1.0), Utterance("y", "s2", "A", 0, 2, 1.0)]).validate()


@pytest.mark.parametrize("n_spk,n_utt", [(16, 10), (5, 3), (2, 2)])
def test_trials_balanced(n_spk, n_utt, tmp_path):
    man = make_corpus(0, n_spk, n_utt, "B", 0.5)
    trials = make_trials(man, 1)
    n_tar = sum(t[0] for t in trials)
    assert n_tar == n_spk * n_utt * (n_utt - 1) // 2
    assert abs(n_tar - (len(trials) - n_tar)) <= 1
    spk = {u.utt_id: u.speaker_id for u in man}
    assert all((spk[a] == spk[b]) == bool(lab) for lab, a, b in trials)
    write_trials(tmp_path / "t.txt", trials)
    assert read_trials(tmp_path / "t.txt") == trials
