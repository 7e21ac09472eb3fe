import numpy as np
import pytest

from spkdisent import autodiff as ad
from spkdisent.autodiff import Tensor
from spkdisent.nets import ModelBundle, ModelConfig, embed_batch

SMALL = dict(n_bins=33, n_mels=16, frames=10, n_classes=3, d_emb=6, enc_channels=(3, 3),
             enc_hidden=8, dec_fc=(12,), dec_channels=(4, 2), critic_hidden=5)


@pytest.fixture(scope="module")
def model():
    return ModelBundle.init(ModelConfig(**SMALL), seed=4)


def spec(rng, n=2, t=10, f=33):
    return rng.normal(size=(n, t, f))


def test_default_config_shapes():
    m = ModelBundle.init(ModelConfig(), seed=0)
    x = np.random.default_rng(0).normal(size=(2, 98, 257))
    f = m.encode_speaker(x)
    assert f.shape == (2, 128)
    assert m.decode(f, m.encode_residual(x)).shape == (2, 98, 64)
    assert m.classify(f).shape == (2, 20)
    assert m.critic(f, f).shape == (2,)


def test_tap_identical_frames_equal_single_frame(model, rng):
    row = rng.normal(size=(1, 1, 33))
    many = np.repeat(row, 10, axis=1)
    np.testing.assert_allclose(model.encode_speaker(many).data, model.encode_speaker(row).data, atol=1e-12)


def test_tap_permutation_invariance_is_exact(model, rng):
    x = spec(rng)
    perm = rng.permutation(10)
    for enc in (model.encode_speaker, model.encode_residual):
        assert np.array_equal(enc(x).data, enc(x[:, perm]).data)


def test_encoders_have_distinct_parameters(model, rng):
    x = spec(rng)
    assert not np.allclose(model.encode_speaker(x).data, model.encode_residual(x).data)


def test_encoder_rejects_wrong_bins(model, rng):
    with pytest.raises(ValueError):
        model.encode_speaker(spec(rng, f=32))


def test_classify_zero_weights_uniform(rng):
    m = ModelBundle.init(ModelConfig(**SMALL), seed=0)
    m.params["cls.w"].data[:] = 0.0
    p = np.exp(ad.log_softmax(m.classify(Tensor(rng.normal(size=(4, 6))))).data)
    np.testing.assert_allclose(p, 1 / 3, atol=1e-15)


def test_classify_hand_set_two_clusters():
    cfg = ModelConfig(**{**SMALL, "n_classes": 2})
    m = ModelBundle.init(cfg, seed=0)
    mu = np.stack([np.full(6, -1.0), np.full(6, 1.0)])
    m.params["cls.w"].data[:] = np.stack([-np.ones(6), np.ones(6)], axis=1)
    m.params["cls.b"].data[:] = 0.0
    assert m.classify(Tensor(mu)).data.argmax(axis=1).tolist() == [0, 1]
    with pytest.raises(ValueError):
        m.classify(Tensor(np.ones((1, 5))))


def test_classify_frozen_blocks_head_gradient(model, rng):
    f = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    head = model.group("cls")
    loss = ad.sum(ad.square(model.classify(f, frozen=True)))
    grads = ad.backward(loss, {**head, "f": f})
    assert all(not g.any() for k, g in grads.items() if k != "f")
    assert grads["f"].any()


def test_decode_shape_deterministic(model, rng):
    a, b = Tensor(rng.normal(size=(2, 6))), Tensor(rng.normal(size=(2, 6)))
    out = model.decode(a, b)
    assert out.shape == (2, 10, 16)
    assert np.array_equal(out.data, model.decode(a, b).data)
    with pytest.raises(ValueError):
        model.decode(a, Tensor(np.ones((2, 5))))


def test_decode_extra_layers():
    m = ModelBundle.init(ModelConfig(**{**SMALL, "dec_extra_layers": 2}), seed=1)
    z = Tensor(np.ones((1, 6)))
    assert m.decode(z, z).shape == (1, 10, 16)


def test_critic_starts_at_zero_and_is_bounded(model, rng):
    x, y = Tensor(rng.normal(size=(5, 6))), Tensor(rng.normal(size=(5, 6)))
    assert np.all(model.critic(x, y).data == 0.0)
    m = model.copy()
    m.params["critic.fc1.w"].data[:] = 1e3
    out = m.critic(x, y).data
    assert np.all(np.abs(out) <= m.cfg.critic_bound)


def test_groups_partition_parameters(model):
    names = [k for g in ("spk", "res", "dec", "cls", "critic") for k in model.group(g)]
    assert sorted(names) == sorted(model.params)
    with pytest.raises(KeyError):
        model.group("bogus")


def test_init_deterministic_and_seeded():
    cfg = ModelConfig(**SMALL)
    assert ModelBundle.init(cfg, 3).checksum() == ModelBundle.init(cfg, 3).checksum()
    assert ModelBundle.init(cfg, 3).checksum() != ModelBundle.init(cfg, 4).checksum()


def test_save_load_roundtrip(tmp_path, model, rng):
    path = tmp_path / "m.ckpt"
    model.save(path)
    back = ModelBundle.load(path)
    assert back.checksum() == model.checksum()
    assert back.cfg == model.cfg
    x = spec(rng)
    assert np.array_equal(back.encode_speaker(x).data, model.encode_speaker(x).data)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        ModelBundle.load(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    with pytest.raises(ValueError):
        ModelBundle.load(tmp_path / "junk.ckpt")


def test_embed_batch_chunking(model, rng):
    x = spec(rng, n=7)
    a = embed_batch(model, x, "spk", chunk=3)
    np.testing.assert_allclose(a, model.encode_speaker(x).data, atol=1e-12)
    assert embed_batch(model, x, "res").shape == (7, 6)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(**{**SMALL, "n_classes": 1})
    with pytest.raises(ValueError):
        ModelConfig(**{**SMALL, "n_mels": 18})
