from __future__ import annotations

import math

import numpy as np
import pytest

from pediarr import agcacl as L
from pediarr import autodiff as ad
from pediarr.autodiff import Tensor
from pediarr.model import (ZERO_GRAD_PARAMS, FusionNet, ModelConfig, encoder_lengths,
                           focal_loss, sinusoidal_encoding)

TOY = ModelConfig().scaled(8)
TINY = ModelConfig().scaled(16)


@pytest.fixture(scope="module")
def toy():
    return FusionNet(TOY, seed=0)


def _inputs(rng, b, t, cfg=TOY):
    return (rng.standard_normal((b, cfg.ecg_channels, t)),
            rng.standard_normal((b, cfg.iegm_channels, t)))


def test_full_config_shapes_and_size():
    cfg = ModelConfig()
    assert (cfg.embed_dim, cfg.fusion_dim, cfg.head_dim, cfg.heads, cfg.d_ff) == (256, 512, 64, 4, 128)
    net = FusionNet(cfg, seed=0)
    assert net.params["fuse.out.w"].shape == (1024, 512)
    assert net.params["fuse.q_e.w"].shape == (256, 256)
    assert net.params["head.tok.w"].shape == (1, 64)
    assert net.params["head.cls.w"].shape == (64, 6)
    rng = np.random.default_rng(0)
    ze = net.encode("enc_e", rng.standard_normal((2, 12, 977)))
    assert ze.shape == (2, 256)


def test_toy_scaling_rule():
    assert TOY.stage_channels == (8, 16, 32, 32)
    assert (TOY.fusion_dim, TOY.head_dim, TOY.d_ff, TOY.heads) == (64, 8, 16, 4)
    with pytest.raises(ValueError):
        ModelConfig(head_dim=10, heads=4)


def test_encoder_length_bookkeeping():
    assert encoder_lengths(ModelConfig(), 977) == [489, 245, 123, 62, 31]


def test_forward_shapes_toy(toy):
    xe, xm = _inputs(np.random.default_rng(1), 4, 977)
    z, logits = toy(xe, xm, training=False)
    assert z.shape == (4, 64) and logits.shape == (4, 6)


def test_eval_is_deterministic_and_per_sample(toy):
    rng = np.random.default_rng(2)
    xe, xm = _inputs(rng, 3, 200)
    z1, l1 = toy(xe, xm)
    z2, l2 = toy(xe, xm)
    np.testing.assert_array_equal(l1.data, l2.data)
    xe2, xm2 = np.concatenate([xe, xe[:1]]), np.concatenate([xm, xm[:1]])
    z3, l3 = toy(xe2, xm2)
    np.testing.assert_allclose(l3.data[3], l3.data[0], atol=1e-12)
    np.testing.assert_allclose(l3.data[:3], l1.data, atol=1e-12)


def test_train_mode_needs_rng(toy):
    xe, xm = _inputs(np.random.default_rng(3), 2, 100)
    with pytest.raises(ValueError):
        toy(xe, xm, training=True)


def test_zero_input_gives_zero_embedding():
    net = FusionNet(TINY, seed=0)
    z = net.encode("enc_e", np.zeros((2, 12, 128)), training=False)
    np.testing.assert_array_equal(z.data, 0.0)


def test_encoder_rejects_bad_shapes(toy):
    with pytest.raises(ad.ShapeError):
        toy.encode("enc_e", np.zeros((1, 6, 100)))
    with pytest.raises(ValueError):
        toy.encode("enc_e", np.zeros((1, 12, 0)))


def test_fuse_zero_parameters_give_zero_gates():
    net = FusionNet(TINY, seed=0)
    for mod in "em":
        for kind in "qkv":
            net.params[f"fuse.{kind}_{mod}.w"].data[:] = 0.0
    e = TINY.embed_dim
    rng = np.random.default_rng(4)
    ze, zm = Tensor(rng.standard_normal((3, e))), Tensor(rng.standard_normal((3, e)))
    zbar = net.gated(ze, zm, "e", "m").data
    np.testing.assert_array_equal(zbar, 0.0)
    gate = 1.0 / (1.0 + math.exp(-0.0))
    assert gate == 0.5


def test_fuse_matches_numpy_reference():
    net = FusionNet(TINY, seed=5)
    P = {k: v.data for k, v in net.params.items()}
    rng = np.random.default_rng(6)
    e = TINY.embed_dim
    ze, zm = rng.standard_normal((3, e)), rng.standard_normal((3, e))

    def lin(n, x):
        return x @ P[f"{n}.w"] + P[f"{n}.b"]

    sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
    be = sig(lin("fuse.q_e", ze) * lin("fuse.k_m", zm) / math.sqrt(e)) * lin("fuse.v_m", zm)
    bm = sig(lin("fuse.q_m", zm) * lin("fuse.k_e", ze) / math.sqrt(e)) * lin("fuse.v_e", ze)
    h = np.maximum(lin("fuse.out", np.concatenate([be, bm, ze, zm], axis=1)), 0)
    mu, var = h.mean(1, keepdims=True), h.var(1, keepdims=True)
    ref = (h - mu) / np.sqrt(var + 1e-5) * P["fuse.ln.g"] + P["fuse.ln.b"]
    np.testing.assert_allclose(net.fuse(ze, zm).data, ref, atol=1e-12)


def test_fuse_modality_swap_symmetry():
    net = FusionNet(TINY, seed=7)
    rng = np.random.default_rng(8)
    e = TINY.embed_dim
    ze, zm = Tensor(rng.standard_normal((2, e))), Tensor(rng.standard_normal((2, e)))
    a = net.gated(ze, zm, "e", "m").data
    b = net.gated(zm, ze, "m", "e").data
    # swap the modality-indexed parameter sets and the inputs
    for kind in "qkv":
        for part in "wb":
            pe, pm = net.params[f"fuse.{kind}_e.{part}"], net.params[f"fuse.{kind}_m.{part}"]
            pe.data, pm.data = pm.data, pe.data
    np.testing.assert_array_equal(net.gated(zm, ze, "e", "m").data, b)
    np.testing.assert_array_equal(net.gated(ze, zm, "m", "e").data, a)


def test_fuse_gradcheck_small():
    cfg = ModelConfig(stage_channels=(2, 2, 4, 8), fusion_dim=8, head_dim=4, d_ff=4)
    net = FusionNet(cfg, seed=9)
    rng = np.random.default_rng(10)
    ze = Tensor(rng.standard_normal((2, 8)), requires_grad=True, name="ze")
    zm = Tensor(rng.standard_normal((2, 8)), requires_grad=True, name="zm")
    w = rng.standard_normal((2, 8))
    params = {k: v for k, v in net.params.items() if k.startswith("fuse")}
    params.update(ze=ze, zm=zm)
    rep = ad.gradcheck(lambda: ad.tsum(ad.mul(net.fuse(ze, zm), w)), params, tol=1e-5, retries=2)
    assert rep.passed, rep.to_text()


def test_positional_encoding():
    pe = sinusoidal_encoding(16, 8)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert pe[3, 2] == pytest.approx(math.sin(3 / 10000 ** (2 / 8)))
    assert pe[3, 3] == pytest.approx(math.cos(3 / 10000 ** (2 / 8)))


def test_head_shapes_and_position_sensitivity(toy):
    rng = np.random.default_rng(11)
    z = rng.standard_normal((2, TOY.seq_len))
    logits = toy.head(z).data
    assert logits.shape == (2, 6)
    perm = rng.permutation(TOY.seq_len)
    assert not np.allclose(toy.head(z[:, perm]).data, logits)
    with pytest.raises(ad.ShapeError):
        toy.head(np.zeros((2, 5)))


def test_focal_closed_forms():
    logits = np.zeros((4, 6))
    labels = np.array([1, 2, 3, 6])
    assert focal_loss(logits, labels, 0.0).item() == pytest.approx(math.log(6), abs=1e-12)
    assert focal_loss(logits, labels, 1.0).item() == pytest.approx(5 / 6 * math.log(6), abs=1e-12)
    assert focal_loss(logits, labels, 1.0).item() == pytest.approx(1.4931, abs=1e-4)
    confident = np.full((1, 6), -50.0)
    confident[0, 2] = 50.0
    assert focal_loss(confident, np.array([3]), 1.0).item() < 1e-30


def test_focal_gamma_zero_is_cross_entropy():
    rng = np.random.default_rng(12)
    logits = rng.standard_normal((9, 6)) * 3
    labels = rng.integers(1, 7, 9)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(9), labels - 1].mean()
    assert focal_loss(logits, labels, 0.0).item() == pytest.approx(ce, abs=1e-12)


def test_focal_rejects_bad_labels():
    with pytest.raises(ValueError):
        focal_loss(np.zeros((2, 6)), np.array([0, 1]))


def test_state_dict_round_trip(tmp_path):
    from pediarr.container import load_tensors, save_tensors
    a = FusionNet(TINY, seed=1)
    save_tensors(tmp_path / "p", a.state_dict())
    b = FusionNet(TINY, seed=2)
    b.load_state_dict(load_tensors(tmp_path / "p"))
    xe, xm = _inputs(np.random.default_rng(0), 2, 64, TINY)
    np.testing.assert_array_equal(a(xe, xm)[1].data, b(xe, xm)[1].data)


def test_full_graph_gradcheck_on_reduced_clone():
    """Focal + AGCACL through encoders, fusion, head and prototypes."""
    net = FusionNet(TINY, seed=3)
    rng = np.random.default_rng(4)
    xe, xm = _inputs(rng, 4, 64, TINY)
    labels = np.array([1, 2, 3, 1])
    protos = L.init_prototypes(6, TINY.fusion_dim, seed=5)
    alpha = L.compute_alpha([10, 5, 2, 1, 1, 1])
    phi = np.full((6, 6), 0.2) - np.eye(6) * 0.2
    psi = np.full(6, 1 / 6)

    def objective():
        z, logits = net(xe, xm, training=True, rng=np.random.default_rng(0))
        con = L.agcacl_total(z, labels, protos, alpha, phi, psi).loss
        return L.combined_objective(focal_loss(logits, labels), con)

    params = {k: v for k, v in net.params.items() if k not in ZERO_GRAD_PARAMS}
    params["prototypes"] = protos
    # h = 1e-5 keeps the probes from crossing ReLU/max-pool kinks downstream
    rep = ad.gradcheck(objective, params, h=1e-5, tol=1e-4, max_entries=3, retries=2, seed=1)
    assert rep.passed, rep.to_text()
    key_bias = net.params[ZERO_GRAD_PARAMS[0]]
    key_bias.grad = None
    (g,) = ad.backward(objective(), [key_bias])
    assert np.abs(g).max() < 1e-12
