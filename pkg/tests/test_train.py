import math

import numpy as np
import pytest

from spkdisent.autodiff import NonFiniteError
from spkdisent.data import FeatureBank, PairSampler, generate_synthetic_corpus
from spkdisent.nets import ModelBundle
from spkdisent.train import (STAGE_TRAINABLE, Adam, TrainConfig, Trainer, TrainingDiverged, adam_step,
                             feature_stats, fit, learning_rate)
from spkdisent.autodiff import Tensor

SMALL = dict(segment_s=0.3, batch_size=8, d_emb=12, enc_channels="3,3", enc_hidden=16, dec_fc="32",
             dec_channels="4,2", critic_hidden=12, prefetch=0)


def make_trainer(corpus, n_classes=None, **kw):
    cfg = TrainConfig(**{**SMALL, **kw})
    bank = FeatureBank(corpus, cfg.extractor())
    mcfg = cfg.model_config(n_classes or len(corpus.speakers), **feature_stats(bank))
    model = ModelBundle.init(mcfg, seed=cfg.seed)
    sampler = PairSampler(bank, mcfg.frames, cfg.batch_size, np.random.default_rng(cfg.seed))
    return Trainer(model, cfg), sampler


# -- schedule ---------------------------------------------------------------------

def test_learning_rate_schedule():
    assert learning_rate(25, 1e-3, 10) == 1e-3 * 0.5 ** 2 == 2.5e-4
    for e in range(100):
        assert learning_rate(e) == 1e-3 * 0.5 ** math.floor(e / 10)


# -- Adam ----------------------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    opt = Adam()
    adam_step(opt, p, {"w": np.zeros(2)}, 1e-3)
    assert p["w"].data.tolist() == [1.0, -2.0]
    assert opt.state.step == 1 and opt.state.t["w"] == 1


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.01, 250.0])
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    Adam().step(p, {"w": g}, 1e-3)
    # at t=1 both bias corrections cancel: update = -lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"].data, -1e-3 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-18)
    np.testing.assert_allclose(p["w"].data, -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=4) for _ in range(5)]

    def run():
        p = {"w": Tensor(np.ones(4), requires_grad=True)}
        opt = Adam()
        for g in grads:
            opt.step(p, {"w": g}, 1e-2)
        return p["w"].data, opt.state

    (a, sa), (b, sb) = run(), run()
    assert np.array_equal(a, b) and np.array_equal(sa.m["w"], sb.m["w"]) and np.array_equal(sa.v["w"], sb.v["w"])


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.ones(3), requires_grad=True)}
    with pytest.raises(ValueError):
        Adam().step(p, {"w": np.ones(2)}, 1e-3)


# -- config ----------------------------------------------------------------------------

def test_config_text_roundtrip_and_unknown_keys():
    cfg = TrainConfig(seed=3, losses="ls,lr,ladv", phase2_speaker_loss=False)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(KeyError):
        TrainConfig.from_text("nonsense = 1\n")
    with pytest.raises(KeyError):
        cfg.with_overrides(nonsense=1)
    with pytest.raises(ValueError):
        TrainConfig.from_text("checkpoint_every_epoch = maybe\n")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(losses="lr,lmi")
    with pytest.raises(ValueError):
        TrainConfig(losses="ls,lzz")
    with pytest.raises(ValueError):
        TrainConfig(mi_mode="sideways")
    with pytest.raises(ValueError):
        TrainConfig(lambda2=-0.1)


# -- steps -------------------------------------------------------------------------------------

def test_phase1_report_contains_enabled_terms(small_corpus):
    tr, s = make_trainer(small_corpus, losses="ls,lr,ladv,lmi")
    rep = tr.phase1_step(s.sample(), 1e-3)
    assert {"ls", "lr", "ladv", "V", "total"} <= set(rep.values)
    tr, s = make_trainer(small_corpus, losses="ls")
    assert set(tr.phase1_step(s.sample(), 1e-3).values) == {"ls", "total"}


def test_phase1_joint_step_updates_groups(small_corpus):
    tr, s = make_trainer(small_corpus, losses="ls,lr,lmi")
    before = {g: tr.model.checksum(g) for g in ("spk", "res", "dec", "cls", "critic")}
    tr.phase1_step(s.sample(), 1e-3)
    assert all(tr.model.checksum(g) != before[g] for g in before)


def test_critic_update_touches_only_critic(small_corpus):
    tr, s = make_trainer(small_corpus, losses="ls,lmi")
    m = tr.model
    b = s.sample()
    before = {g: m.checksum(g) for g in ("spk", "res", "dec", "cls", "critic")}
    tr._critic_update(m.encode_speaker(b.spec_a), m.encode_speaker(b.spec_a2),
                      m.encode_residual(b.spec_a), m.encode_residual(b.spec_a2), 1e-3)
    after = {g: m.checksum(g) for g in before}
    assert after["critic"] != before["critic"]
    assert all(after[g] == before[g] for g in ("spk", "res", "dec", "cls"))


@pytest.mark.parametrize("stage", ["ic", "adapt"])
def test_phase2_selective_update(small_corpus, stage):
    tr, s = make_trainer(small_corpus, losses="ls,lr,lmi,lic,ladv")
    for _ in range(2):
        tr.phase1_step(s.sample(), 1e-3)
    m = tr.model
    groups = ("spk", "res", "dec", "cls")
    before = {g: m.checksum(g) for g in groups}
    tr.phase2_step(s.sample(), 1e-3, stage)
    after = {g: m.checksum(g) for g in groups}
    for g in groups:
        assert (after[g] != before[g]) == (g in STAGE_TRAINABLE[stage]), g


def test_phase2_rejects_cross_speaker_batch(small_corpus):
    tr, s = make_trainer(small_corpus)
    b = s.sample()
    other = next(r for r in s.same_speaker[s.speakers[1]])
    b.refs_b[0] = other if not b.refs_a[0].startswith(s.speakers[1]) else s.same_speaker[s.speakers[0]][0]
    with pytest.raises(ValueError):
        tr.phase2_step(b, 1e-3, "ic")
    with pytest.raises(ValueError):
        tr.phase2_step(s.sample(), 1e-3, "bogus")


def test_speaker_loss_only_learns_to_classify():
    corpus = generate_synthetic_corpus(4, 3, 1.5, seed=11)
    tr, s = make_trainer(corpus, losses="ls", batch_size=16)
    for _ in range(200):
        tr.phase1_step(s.sample(), 1e-3)
    m = tr.model
    b = s.sample()
    acc = np.mean(m.classify(m.encode_speaker(b.spec_a)).data.argmax(axis=1) == b.labels)
    assert acc > 0.9


def test_reconstruction_only_decreases_mse(small_corpus):
    tr, s = make_trainer(small_corpus, losses="ls,lr", lambda1=0.0)
    losses = [tr.phase1_step(s.sample(), 1e-3)["lr"] for _ in range(200)]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    assert losses[-1] < losses[0]


# -- fit -------------------------------------------------------------------------------------------

FIT = dict(SMALL, phase1_epochs=2, phase2_epochs=2, steps_per_epoch=2, batch_size=4)


def test_fit_outputs_and_determinism(tmp_path, tiny_corpus):
    cfg = TrainConfig(**{**FIT, "prefetch": 2})
    a = fit(cfg, tiny_corpus, tmp_path / "a")
    b = fit(cfg, tiny_corpus, tmp_path / "b")
    assert a.model.checksum() == b.model.checksum()
    assert a.phase1_model.checksum() == b.phase1_model.checksum() != a.model.checksum()
    for name in ["final.ckpt", "phase1.ckpt", "epoch000.ckpt", "epoch003.ckpt", "train_log.csv", "config.ini"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    lines = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    assert len(lines) == 1 + 8 == 1 + len(a.log_rows)
    stages = [r["stage"] for r in a.log_rows]
    assert stages == ["joint"] * 4 + ["ic", "adapt", "ic", "adapt"]
    assert [r["lr"] for r in a.log_rows] == [1e-3] * 8


def test_fit_without_lic_continues_phase1_steps(tiny_corpus):
    res = fit(TrainConfig(**{**FIT, "losses": "ls,lr,ladv"}), tiny_corpus)
    assert [r["stage"] for r in res.log_rows] == ["joint"] * 8
    assert all(r["L_IC"] is None and r["L_adv"] is not None for r in res.log_rows)


def test_fit_prefetch_matches_inline(tiny_corpus):
    a = fit(TrainConfig(**{**FIT, "prefetch": 0}), tiny_corpus)
    b = fit(TrainConfig(**{**FIT, "prefetch": 3}), tiny_corpus)
    assert a.model.checksum() == b.model.checksum()


def test_fit_divergence_reports_step(tiny_corpus, monkeypatch):
    calls = {"n": 0}
    original = Trainer.phase1_step

    def flaky(self, batch, lr):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NonFiniteError("nan in test")
        return original(self, batch, lr)

    monkeypatch.setattr(Trainer, "phase1_step", flaky)
    with pytest.raises(TrainingDiverged) as info:
        fit(TrainConfig(**FIT), tiny_corpus)
    assert info.value.step == 2


def test_decoder_fits_one_speaker_tenfold():
    two = generate_synthetic_corpus(2, 4, 2.0, seed=5)
    one = two.subset(two.speakers[:1])
    tr, s = make_trainer(one, n_classes=2, losses="ls,lr", batch_size=8, d_emb=24, enc_channels="4,4",
                         enc_hidden=32, dec_fc="96", dec_channels="8,4")
    m = tr.model
    held = s.sample()

    def mse():
        rec = m.decode(m.encode_speaker(held.spec_a), m.encode_residual(held.spec_a)).data
        return float(np.mean((rec - m.normalize_target(held.mel_a).data) ** 2))

    initial = mse()
    for _ in range(800):
        tr.phase1_step(s.sample(), 3e-3)
    assert mse() < initial / 10
