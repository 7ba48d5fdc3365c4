import json
from dataclasses import replace

import numpy as np
import pytest

from petlsv import trainer as tr
from petlsv.datagen import make_corpus
from petlsv.errors import ContractError, DivergenceError, InputError
from petlsv.model import SpeakerModel
from petlsv.numcore import load_checkpoint
from petlsv.petl import PetlConfig, count_params
from petlsv.trainer import LmFtConfig, TrainConfig, build_model, checkpoint_delta, fit, lm_finetune, train, two_stage

QUICK = TrainConfig(epochs=1, base_lr=1e-3, batch_size=8, crop_s=0.25, seed=0)


@pytest.fixture(scope="module")
def tiny_a():
    return make_corpus(5, 4, 4, "A", 0.5)


@pytest.fixture(scope="module")
def tiny_b():
    return make_corpus(5, 3, 4, "B", 0.5)


def snapshot(groups, prefix=""):
    return {g.name: g.data.tobytes() for g in groups if g.name.startswith(prefix)}


def test_lr_schedule_exact():
    cfg = TrainConfig(base_lr=0.02)
    assert [cfg.lr(e) for e in range(4)] == [0.02 * 0.95**e for e in range(4)]


def test_config_validation():
    with pytest.raises(InputError):
        TrainConfig(epochs=0)
    with pytest.raises(InputError):
        TrainConfig(lr_decay_per_epoch=1.5)
    with pytest.raises(InputError):
        TrainConfig(optimizer="rmsprop")


def test_config_dict_roundtrip():
    cfg = replace(QUICK, petl=PetlConfig("mam", d_bottleneck=8, l=4))
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


@pytest.mark.parametrize("opt", ["sgd", "adam"])
def test_zero_lr_leaves_parameters(tiny_a, opt):
    cfg = replace(QUICK, base_lr=0.0, optimizer=opt)
    model = build_model(cfg, tiny_a.speakers)
    before = snapshot(model.groups())
    rows = fit(model, tiny_a, cfg)
    assert snapshot(model.groups()) == before
    assert rows[-1]["step"] is None and np.isfinite(rows[-1]["loss"])
    assert {"epoch", "step", "lr", "loss"} == set(rows[0])


def test_fixed_mode_keeps_backbone_bytes(tiny_a, tmp_path):
    cfg = replace(QUICK, epochs=2, petl=PetlConfig("fixed"))
    init = SpeakerModel("desk", seed=cfg.seed)
    res = train(cfg, tiny_a, tmp_path, "fixed.ckpt")
    after = {g.name: g.data.tobytes() for g in load_checkpoint(res.checkpoint) if g.name.startswith("backbone.")}
    assert after == snapshot(init.groups(), "backbone.")
    assert snapshot(res.model.groups(), "backend.") != snapshot(init.groups(), "backend.")


def test_training_reduces_loss():
    man = make_corpus(2, 8, 6, "A", 1.0)
    res = train(replace(TrainConfig(), epochs=5, crop_s=0.5), man)
    losses = res.epoch_losses
    assert len(losses) == 5 and losses[-1] < losses[0]
    assert [r["lr"] for r in res.log if r["step"] is None] == [1e-3 * 0.95**e for e in range(5)]


def test_outputs_written(tiny_a, tmp_path):
    res = train(QUICK, tiny_a, tmp_path, "m.ckpt")
    rows = [json.loads(line) for line in (tmp_path / "m.metrics.jsonl").read_text().splitlines()]
    assert rows == json.loads(json.dumps(res.log))
    assert json.loads((tmp_path / "m.config.json").read_text())["crop_s"] == 0.25
    model, meta = SpeakerModel.from_checkpoint(res.checkpoint)
    assert meta["final_lr"] == res.final_lr


def test_divergence_reports_position(tiny_a, monkeypatch):
    model = build_model(QUICK, tiny_a.speakers)
    real = model.loss
    calls = {"n": 0}

    def flaky(w, y, m=None):
        calls["n"] += 1
        out = real(w, y, m)
        if calls["n"] == 2:
            out.data = np.float32(np.nan)
        return out

    monkeypatch.setattr(model, "loss", flaky)
    with pytest.raises(DivergenceError, match="epoch 0, step 1"):
        fit(model, tiny_a, QUICK)


def test_frozen_write_detected(tiny_a, monkeypatch):
    model = build_model(replace(QUICK, petl=PetlConfig("fixed")), tiny_a.speakers)
    real_step = tr.Optimizer.step

    def leaky(self, grads, lr):
        real_step(self, grads, lr)
        model.backbone.params["backbone.block0.ln1.b"].tensor.data += 1.0

    monkeypatch.setattr(tr.Optimizer, "step", leaky)
    with pytest.raises(ContractError, match="ln1.b"):
        fit(model, tiny_a, replace(QUICK, petl=PetlConfig("fixed")))


def test_needs_two_speakers():
    man = make_corpus(0, 2, 2, "A", 0.5)
    with pytest.raises(InputError):
        train(QUICK, type(man)([u for u in man if u.speaker_id == man.speakers[0]]))


def test_batches_are_seeded_and_shaped(tiny_a):
    a = list(tr.make_batches(tiny_a, tiny_a.speakers, QUICK, 0, {}))
    b = list(tr.make_batches(tiny_a, tiny_a.speakers, QUICK, 0, {}))
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))
    assert a[0][0].shape == (8, 4000)
    c = list(tr.make_batches(tiny_a, tiny_a.speakers, QUICK, 1, {}))
    assert not all(np.array_equal(x[1], y[1]) for x, y in zip(a, c))


def test_chunked_gradients_match_whole_batch(tiny_a):
    cfg = replace(QUICK, petl=PetlConfig("mam", d_bottleneck=8, l=4))
    model = build_model(cfg, tiny_a.speakers)
    waves, labels = next(tr.make_batches(tiny_a, tiny_a.speakers, cfg, 0, {}))
    groups = model.groups()
    v1, g1 = tr._batch_grads(model, groups, waves, labels, 0.2, budget=2**30)
    assert tr.micro_batch_size(model, waves.shape[1], 8, 3 * 4 * 129**2) == 3
    v2, g2 = tr._batch_grads(model, groups, waves, labels, 0.2, budget=3 * 4 * 129**2)
    assert v2 == pytest.approx(v1, rel=1e-5)
    assert g1.keys() == g2.keys()
    for name in g1:
        np.testing.assert_allclose(g2[name], g1[name], rtol=1e-3, atol=1e-6)


def test_short_crops_zero_padded():
    rng = np.random.default_rng(0)
    out = tr.crop(np.ones(10, np.float32), 16, rng)
    assert out.tolist() == [1.0] * 10 + [0.0] * 6


def test_class_mean_head_points_at_speakers(tiny_a):
    model = build_model(QUICK, tiny_a.speakers)
    tr.init_head_from_means(model, tiny_a)
    u = tiny_a[0]
    e = model.embed_numpy(u.load())
    C = model.head.C.data / np.linalg.norm(model.head.C.data, axis=0)
    assert np.argmax(e @ C) == model.speakers.index(u.speaker_id)


# ---------------------------------------------------------------- LM-FT


@pytest.fixture(scope="module")
def mam_run(tiny_a, tmp_path_factory):
    out = tmp_path_factory.mktemp("mam")
    cfg = replace(QUICK, petl=PetlConfig("mam", d_bottleneck=8, l=4), epochs=2)
    return train(cfg, tiny_a, out, "mam.ckpt"), out


def test_lmft_overrides(mam_run, tiny_a, monkeypatch):
    res, out = mam_run
    shapes = []
    real = tr.make_batches

    def spy(*a, **k):
        for w, y in real(*a, **k):
            shapes.append(w.shape)
            yield w, y

    monkeypatch.setattr(tr, "make_batches", spy)
    lm = lm_finetune(res.checkpoint, LmFtConfig(), tiny_a, out, "lmft.ckpt")
    logged = json.loads((out / "lmft.config.json").read_text())
    assert res.config.margin == 0.2 and logged["margin"] == 0.5
    assert logged["crop_s"] == 5.0 and shapes[0][1] == 5 * 16000
    assert {r["lr"] for r in lm.log} == {res.final_lr}
    assert len(lm.epoch_losses) == 2

    changed, _ = checkpoint_delta(res.checkpoint, lm.checkpoint)
    trainable = {g.name for g in load_checkpoint(res.checkpoint) if g.trainable}
    assert changed and set(changed) <= trainable


def test_lmft_rejects_other_speakers(mam_run, tiny_b):
    with pytest.raises(InputError):
        lm_finetune(mam_run[0].checkpoint, LmFtConfig(), tiny_b)


# ---------------------------------------------------------------- two-stage


def test_two_stage_fixed_changes_backend_only(tiny_a, tiny_b, tmp_path):
    first, second = two_stage(tiny_a, tiny_b, PetlConfig("fixed"), QUICK, out_dir=tmp_path)
    assert (tmp_path / "stage1.ckpt").exists() and (tmp_path / "stage2.ckpt").exists()
    changed, _ = checkpoint_delta(tmp_path / "stage1.ckpt", tmp_path / "stage2.ckpt")
    assert changed and all(n.startswith(("backend.", "head.")) for n in changed)
    assert second.model.speakers == tiny_b.speakers


def test_two_stage_mam_delta_and_composition(tiny_a, tiny_b, tmp_path):
    mam = PetlConfig("mam", d_bottleneck=8, l=4)
    two_stage(tiny_a, tiny_b, mam, QUICK, out_dir=tmp_path / "joint")
    changed, size = checkpoint_delta(tmp_path / "joint" / "stage1.ckpt", tmp_path / "joint" / "stage2.ckpt")
    assert all(n.startswith(("petl.", "backend.", "head.")) for n in changed)
    assert any(n.startswith("petl.") for n in changed)

    # composition oracle: the same two stages run separately
    s1 = train(QUICK, tiny_a, tmp_path / "sep", "stage1.ckpt")
    train(replace(QUICK, petl=mam, init_from=str(s1.checkpoint)), tiny_b, tmp_path / "sep", "stage2.ckpt")
    assert (tmp_path / "joint" / "stage1.ckpt").read_bytes() == (tmp_path / "sep" / "stage1.ckpt").read_bytes()
    # stage-2 headers record different init_from paths; payloads and logs must match
    joint, sep = load_checkpoint(tmp_path / "joint" / "stage2.ckpt"), load_checkpoint(tmp_path / "sep" / "stage2.ckpt")
    assert [(g.name, g.trainable, g.data.tobytes()) for g in joint] == [(g.name, g.trainable, g.data.tobytes()) for g in sep]
    assert (tmp_path / "joint" / "stage2.metrics.jsonl").read_bytes() == (tmp_path / "sep" / "stage2.metrics.jsonl").read_bytes()


def test_base_shape_mam_delta_fraction():
    # stored delta of a MAM(256, 40) stage: adapters + prefixes + MHFA back-end
    rep = count_params("base", PetlConfig("mam", d_bottleneck=256, l=40))
    delta = rep.trainable_petl + rep.trainable_backend
    assert delta == 5_468_160 + 2_301_978
    assert delta / rep.total == pytest.approx(0.07765, abs=5e-5)


def test_overlap_is_logged(tiny_a, tmp_path, caplog):
    with caplog.at_level("WARNING"):
        two_stage(tiny_a, tiny_a, PetlConfig("fixed"), QUICK, out_dir=tmp_path)
    assert "overlap" in caplog.text


def test_init_from_mam_checkpoint_refused(mam_run, tiny_b):
    with pytest.raises(ContractError):
        build_model(replace(QUICK, init_from=str(mam_run[0].checkpoint)), tiny_b.speakers)
