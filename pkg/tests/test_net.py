"""Network tests: block oracles, gate/fusion invariants, grad check, checkpoints."""

import numpy as np
import pytest

from wicbr import loss as L
from wicbr import net
from wicbr import tensor as T

RNG = np.random.default_rng(16180)


def toy_model(seed=0, **overrides):
    cfg = net.toy_config()
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    return net.init_model(cfg, seed=seed)


def toy_inputs(n=2, hw=28, seed=1):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, 3, hw, hw)), rng.uniform(size=(n, 3, hw, hw))


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    net.NetConfig(input_hw=224)
    net.NetConfig(input_hw=28, c_b=4, gn_groups=4)
    with pytest.raises(ValueError):
        net.NetConfig(input_hw=100)
    with pytest.raises(ValueError):
        net.NetConfig(input_hw=7)
    with pytest.raises(ValueError):
        net.NetConfig(gn_groups=7)
    with pytest.raises(ValueError):
        net.NetConfig(n_classes=1)
    with pytest.raises(ValueError):
        net.NetConfig(fuse_mode="diagonal")


def test_stage_plan():
    assert net.NetConfig(input_hw=224, c_b=32).stage_channels == (16, 32, 64, 32, 32)
    assert net.NetConfig(input_hw=224, c_b=512, gn_groups=16).stage_channels == (16, 32, 64, 512, 512)
    assert net.NetConfig(input_hw=28, c_b=4, gn_groups=4).stage_channels == (4, 4)
    assert net.NetConfig(input_hw=56, c_b=16).stage_channels == (64, 16, 16)


def test_init_deterministic():
    a = net.init_model(net.toy_config(), seed=5)
    b = net.init_model(net.toy_config(), seed=5)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    c = net.init_model(net.toy_config(), seed=6)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


# ---------------------------------------------------------------------------
# attention + refine


def test_attention_zero_weights_gives_half():
    m = toy_model()
    m.params["attn_p/conv1_w"][:] = 0
    m.params["attn_p/conv2_w"][:] = 0
    x = RNG.uniform(size=(2, 3, 28, 28))
    a = net.spatial_attention(m, "p", x)
    assert a.shape == (2, 1, 28, 28)
    assert np.all(a == 0.5)


def test_attention_open_interval_and_shape():
    m = toy_model()
    x = RNG.uniform(size=(2, 3, 28, 28))
    a = net.spatial_attention(m, "p", x)
    assert np.all(a > 0) and np.all(a < 1)
    single = net.spatial_attention(m, "p", x[0])
    assert single.shape == (1, 28, 28)
    assert np.allclose(single, a[0])


def test_attention_composition_oracle():
    m = toy_model(seed=3)
    x = RNG.uniform(size=(1, 3, 28, 28))
    c1 = T.conv2d(x, m.params["attn_p/conv1_w"], stride=1, pad=3)
    c2 = T.conv2d(c1, m.params["attn_p/conv2_w"], stride=1, pad=3)
    bn = T.batch_norm(
        c2,
        m.params["attn_p/bn_gamma"],
        m.params["attn_p/bn_beta"],
        m.params["attn_p/bn_rm"],
        m.params["attn_p/bn_rv"],
    )
    want = T.sigmoid(bn)
    assert np.array_equal(net.spatial_attention(m, "p", x), want)


def test_refine_identity_and_doubling():
    x = RNG.uniform(size=(2, 3, 8, 8))
    assert np.array_equal(net.refine(x, np.zeros((2, 1, 8, 8))), x)
    assert np.allclose(net.refine(x, np.ones((2, 1, 8, 8))), 2 * x)


# ---------------------------------------------------------------------------
# backbone + concat


def test_extract_concat_shape_and_branch_independence():
    m = toy_model()
    xp, xd = toy_inputs()
    out = net.extract_concat(m, xp, xd)
    assert out.shape == (2, 8, 7, 7)
    xd2 = RNG.uniform(size=xd.shape)
    out2 = net.extract_concat(m, xp, xd2)
    assert np.array_equal(out[:, :4], out2[:, :4])  # P half unaffected by D input
    assert not np.allclose(out[:, 4:], out2[:, 4:])


def test_extract_concat_single_sample():
    m = toy_model()
    xp, xd = toy_inputs()
    full = net.extract_concat(m, xp, xd)
    one = net.extract_concat(m, xp[0], xd[0])
    assert one.shape == (8, 7, 7)
    assert np.allclose(one, full[0])


# ---------------------------------------------------------------------------
# saliency gate


def test_saliency_weights_normalize():
    w = net.saliency_weights(np.array([1.0, 3.0, 4.0]))
    assert abs(w.sum() - 1.0) < 1e-15
    with pytest.raises(ValueError):
        net.saliency_weights(np.array([1.0, -1.0]))


def test_saliency_split_invariants():
    m = toy_model()
    x_pd = RNG.normal(size=(3, 8, 7, 7))
    g1, g2, xs, xw = net.saliency_split(m, x_pd)
    assert np.array_equal(g1 + g2, np.ones_like(g1))
    assert np.array_equal(g1 * g2, np.zeros_like(g1))
    assert set(np.unique(g1)) <= {0.0, 1.0}
    assert np.array_equal(xs + xw, x_pd)
    assert np.array_equal(xs, g1 * x_pd)


def test_saliency_split_matches_manual_gate():
    m = toy_model()
    x_pd = RNG.normal(size=(2, 8, 7, 7))
    xhat = T.group_norm(x_pd, 4, m.params["saliency/gamma"], m.params["saliency/z"])
    w = net.saliency_weights(m.params["saliency/gamma"])
    s = T.sigmoid(w[None, :, None, None] * xhat)
    g1, _, _, _ = net.saliency_split(m, x_pd)
    assert np.array_equal(g1, (s > 0.5).astype(float))
    # positive standardized response with positive weights opens the gate
    assert np.array_equal(g1 == 1.0, xhat * w[None, :, None, None] > 0)


def test_saliency_gate_nondegenerate():
    m = toy_model()
    x_pd = RNG.normal(size=(4, 8, 7, 7))
    g1, _, _, _ = net.saliency_split(m, x_pd)
    assert 0.0 < g1.mean() < 1.0


# ---------------------------------------------------------------------------
# fusion


def test_fuse_cross_matches_elementwise_oracle():
    c_b = 4
    xs = RNG.normal(size=(2, 8, 7, 7))
    xw = RNG.normal(size=(2, 8, 7, 7))
    out = net.fuse(xs, xw, c_b, mode="cross")
    for n in range(2):
        for c in range(c_b):
            for y in range(7):
                for x in range(7):
                    assert out[n, c, y, x] == xs[n, c_b + c, y, x] + xw[n, c, y, x]
                    assert out[n, c_b + c, y, x] == xw[n, c_b + c, y, x] + xs[n, c, y, x]


def test_fuse_same_pairs_like_halves():
    c_b = 4
    xs = RNG.normal(size=(1, 8, 5, 5))
    xw = RNG.normal(size=(1, 8, 5, 5))
    out = net.fuse(xs, xw, c_b, mode="same")
    assert np.array_equal(out[:, :c_b], xs[:, :c_b] + xs[:, c_b:])
    assert np.array_equal(out[:, c_b:], xw[:, :c_b] + xw[:, c_b:])


@pytest.mark.parametrize("mode", ["cross", "same"])
def test_fuse_conserves_branch_sum(mode):
    m = toy_model()
    x_pd = RNG.normal(size=(3, 8, 7, 7))
    _, _, xs, xw = net.saliency_split(m, x_pd)
    out = net.fuse(xs, xw, 4, mode=mode)
    # the two fused maps always sum to F_P + F_D, whatever the gate did
    assert np.allclose(out[:, :4] + out[:, 4:], x_pd[:, :4] + x_pd[:, 4:], atol=1e-12)


def test_fuse_rejects_channel_attention_mode():
    with pytest.raises(ValueError):
        net.fuse(np.zeros((1, 8, 7, 7)), np.zeros((1, 8, 7, 7)), 4, mode="channel_attention")


# ---------------------------------------------------------------------------
# head + full forward


def test_classify_is_gap_plus_linear():
    m = toy_model()
    x_out = RNG.normal(size=(2, 8, 7, 7))
    emb, logits = net.classify(m, x_out)
    assert np.allclose(emb, x_out.mean(axis=(2, 3)))
    assert np.allclose(logits, emb @ m.params["head/w"].T + m.params["head/b"])


def test_forward_composes_the_blocks():
    m = toy_model(seed=7)
    xp, xd = toy_inputs(seed=9)
    emb, logits, _ = net.forward(m, xp, xd)
    x_pd = net.extract_concat(m, xp, xd)
    _, _, xs, xw = net.saliency_split(m, x_pd)
    x_out = net.fuse(xs, xw, m.config.c_b, mode="cross")
    emb2, logits2 = net.classify(m, x_out)
    assert np.allclose(emb, emb2, atol=1e-12)
    assert np.allclose(logits, logits2, atol=1e-12)


def test_forward_is_pure_and_deterministic():
    m = toy_model()
    xp, xd = toy_inputs()
    before = {k: v.copy() for k, v in m.params.items()}
    e1, l1, _ = net.forward(m, xp, xd)
    e2, l2, _ = net.forward(m, xp, xd)
    assert np.array_equal(e1, e2) and np.array_equal(l1, l2)
    for k in before:
        assert np.array_equal(before[k], m.params[k])


def test_forward_single_sample_squeezes():
    m = toy_model()
    xp, xd = toy_inputs()
    emb, logits, _ = net.forward(m, xp[0], xd[0])
    assert emb.shape == (8,) and logits.shape == (2,)


def test_forward_validates_input_shape():
    m = toy_model()
    with pytest.raises(ValueError):
        net.forward(m, np.zeros((1, 3, 32, 32)), np.zeros((1, 3, 32, 32)))
    with pytest.raises(ValueError):
        net.forward(m, np.zeros((1, 3, 28, 28)), np.zeros((2, 3, 28, 28)))


def test_neutral_dfs_ignores_d_input():
    from dataclasses import replace

    cfg = replace(net.toy_config(), neutral_dfs=True)
    m = net.init_model(cfg, seed=0)
    xp, xd = toy_inputs()
    _, l1, _ = net.forward(m, xp, xd)
    _, l2, _ = net.forward(m, xp, RNG.uniform(size=xd.shape))
    assert np.array_equal(l1, l2)


def test_channel_attention_mode_runs():
    from dataclasses import replace

    cfg = replace(net.toy_config(), fuse_mode="channel_attention")
    m = net.init_model(cfg, seed=0)
    xp, xd = toy_inputs()
    emb, logits, cache = net.forward(m, xp, xd)
    assert emb.shape == (2, 8) and logits.shape == (2, 2)
    assert "m" in cache["gate"]
    grads = net.backward(m, cache, np.ones_like(logits))
    assert set(grads) == set(m.trainable_names())


# ---------------------------------------------------------------------------
# gradients


def _net_objective(m, xp, xd, labels, beta, tau):
    """Training objective value/grads with the gate frozen at the base point."""
    targets = L.one_hot(labels, m.config.n_classes)
    _, _, cache0 = net.forward(m, xp, xd)
    gate = cache0["gate"]

    def value():
        emb, logits, _ = net.forward(m, xp, xd, fixed_gate=gate)
        ce = L.cross_entropy(logits, targets)
        con = L.proxy_contrastive(emb, labels, m.params["head/w"], tau)
        return ce + beta * con

    emb, logits, cache = net.forward(m, xp, xd, fixed_gate=gate)
    _, dlogits = L.cross_entropy_with_grad(logits, targets)
    _, demb, dprox = L.proxy_contrastive_with_grad(emb, labels, m.params["head/w"], tau)
    grads = net.backward(m, cache, dlogits, beta * demb)
    grads["head/w"] = grads["head/w"] + beta * dprox
    return value, grads


def test_full_net_gradients_subset():
    # spot-check a representative parameter subset; the acceptance suite
    # sweeps every trainable coordinate
    m = toy_model(seed=11)
    xp, xd = toy_inputs(seed=12)
    labels = np.array([0, 1])
    value, grads = _net_objective(m, xp, xd, labels, beta=0.1, tau=0.1)
    subset = [
        "head/w", "saliency/gamma", "backbone_d/s1_w", "attn_p/conv2_w", "attn_d/bn_gamma",
        "backbone_p/s0_b", "backbone_p/s1_gamma", "backbone_d/s0_z",
    ]
    err = T.grad_check(value, [m.params[k] for k in subset], [grads[k] for k in subset], delta=1e-5)
    assert err < 1e-4, f"net grad check failed: {err:.3e}"


def test_saliency_affine_gets_zero_grad():
    m = toy_model()
    xp, xd = toy_inputs()
    _, logits, cache = net.forward(m, xp, xd)
    grads = net.backward(m, cache, np.ones_like(logits))
    assert np.all(grads["saliency/gamma"] == 0)
    assert np.all(grads["saliency/z"] == 0)
    assert set(grads) == set(m.trainable_names())


def test_backward_buffers_untouched():
    m = toy_model()
    xp, xd = toy_inputs()
    _, logits, cache = net.forward(m, xp, xd)
    grads = net.backward(m, cache, np.ones_like(logits))
    assert not any(k.endswith("_rm") or k.endswith("_rv") for k in grads)


# ---------------------------------------------------------------------------
# checkpoints


EXPECTED_TOY_NAMES = sorted(
    [
        "attn_p/conv1_w", "attn_p/conv2_w", "attn_p/bn_gamma", "attn_p/bn_beta", "attn_p/bn_rm", "attn_p/bn_rv",
        "attn_d/conv1_w", "attn_d/conv2_w", "attn_d/bn_gamma", "attn_d/bn_beta", "attn_d/bn_rm", "attn_d/bn_rv",
        "backbone_p/s0_w", "backbone_p/s0_b", "backbone_p/s0_gamma", "backbone_p/s0_z",
        "backbone_p/s1_w", "backbone_p/s1_b", "backbone_p/s1_gamma", "backbone_p/s1_z",
        "backbone_d/s0_w", "backbone_d/s0_b", "backbone_d/s0_gamma", "backbone_d/s0_z",
        "backbone_d/s1_w", "backbone_d/s1_b", "backbone_d/s1_gamma", "backbone_d/s1_z",
        "saliency/gamma", "saliency/z", "head/w", "head/b",
    ]
)


def test_parameter_names_stable():
    m = toy_model()
    assert sorted(m.params) == EXPECTED_TOY_NAMES


def test_checkpoint_roundtrip(tmp_path):
    m = toy_model(seed=21)
    p = tmp_path / "model.ckpt"
    net.save_checkpoint(p, m)
    back = net.load_checkpoint(p)
    assert back.config == m.config
    assert sorted(back.params) == sorted(m.params)
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])


def test_checkpoint_bytes_stable(tmp_path):
    m = toy_model(seed=21)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    net.save_checkpoint(p1, m)
    net.save_checkpoint(p2, net.load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_corrupt(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(net.CheckpointFormatError):
        net.load_checkpoint(p)
    m = toy_model()
    net.save_checkpoint(p, m)
    data = p.read_bytes()
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(net.CheckpointFormatError):
        net.load_checkpoint(p)
