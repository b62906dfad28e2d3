import numpy as np
import pytest
import torch

from uvflow import editkit as ek
from uvflow.flowdit import FlowDiT, ModelConfig, TrainConfig, train_model
from uvflow.sampler import GuidanceConfig, guided_sample

G = GuidanceConfig(eta=0.0, steps=4)


def _portraits(n=1, seed=0):
    return np.random.default_rng(seed).random((n, 16, 16, 3))


def test_group_spec_from_config():
    gs = ek.GroupSpec.from_config(ModelConfig())
    assert gs.group1 == (0, 1, 2, 3) and gs.group2 == (4, 5, 6, 7) and gs.group3 == (8, 9, 10, 11)
    assert gs.layers("mouth") == gs.group2 and gs.layers("brow") == gs.group3
    with pytest.raises(ValueError):
        ek.GroupSpec((0, 2), (1,), (3,))


def test_edit_request_validation():
    p = np.zeros((16, 16, 3))
    with pytest.raises(ValueError):
        ek.EditRequest(p, p, frozenset())
    with pytest.raises(ValueError):
        ek.EditRequest(p, p, {"nose"})
    assert ek.parse_regions("mouth, brow") == {"mouth", "brow"}


def test_layer_orders():
    cfg = ModelConfig()
    assert ek.layer_order(cfg, "single_forward") == list(range(4, 12))
    assert ek.layer_order(cfg, "single_reverse") == list(range(11, 3, -1))
    with pytest.raises(ValueError):
        ek.layer_order(cfg, "sideways")


def test_ablation_identities(tiny_model, monkeypatch):
    import uvflow.toyfaces as tf

    masks = {"all": np.ones((16, 16), bool)}
    monkeypatch.setattr(tf, "feature_masks", lambda: masks)
    c = _portraits()
    plain, _ = guided_sample(c, tiny_model, None, G, 0)
    res = ek.ablation_sweep(c, tiny_model, G, [2, 3], eps=0.0)
    assert np.array_equal(res.textures[0], plain) and res.degradation["all"][0] == 0
    assert len(res.textures) == 3 and res.degradation["all"][2] > 0
    one = ek.ablation_sweep(c, tiny_model, G, [0, 1, 2, 3], eps=1.0)
    assert all(np.array_equal(t, plain) for t in one.textures)
    assert one.onset == {"all": None} and one.onset_order() == []
    with pytest.raises(ValueError):
        ek.ablation_sweep(c, tiny_model, G, [0, 0], eps=0.0)


def test_style_transfer_self_identity(tiny_model):
    c = _portraits()
    plain, _ = guided_sample(c, tiny_model, None, G, 3)
    assert np.array_equal(ek.style_transfer(c, c, tiny_model, None, G, 3), plain)


def test_style_transfer_uses_identity_features(tiny_model):
    a, b = _portraits(seed=1), _portraits(seed=2)
    out = ek.style_transfer(a, b, tiny_model, None, G, 0)
    plain_b, _ = guided_sample(b, tiny_model, None, G, 0)
    assert not np.array_equal(out, plain_b)


def test_cache_step_mismatch(tiny_model):
    c = _portraits()
    caches = ek._record(c, tiny_model, None, G, 0, [0])
    with pytest.raises(ValueError):
        ek._inject(c, tiny_model, None, GuidanceConfig(eta=0.0, steps=5), 0, caches, [0])


def test_regional_edit_rules(tiny_model):
    c = _portraits()[0]
    req = ek.EditRequest(c, c, {"mouth", "brow"})
    with pytest.raises(ValueError):
        ek.regional_edit(req, tiny_model, None, G, 0)
    tiny_model.disentangled = True
    plain, _ = guided_sample(c[None], tiny_model, None, G, 0)
    for localize in (True, False):
        assert np.array_equal(ek.regional_edit(req, tiny_model, None, G, 0, localize=localize), plain[0])
    assert np.array_equal(ek.fuse_edit(req, tiny_model, None, G, 0), plain[0])


def test_fuse_edit_reproduces_reference(tiny_model):
    """Replacing every attention output leaves only the residual/MLP path on the source."""
    a, b = _portraits(seed=1)[0], _portraits(seed=2)[0]
    out = ek.fuse_edit(ek.EditRequest(a, b, {"brow"}), tiny_model, None, G, 0)
    plain_a, _ = guided_sample(a[None], tiny_model, None, G, 0)
    assert not np.array_equal(out, plain_a[0])


def test_texture_token_mask():
    cfg = ModelConfig()
    m = np.zeros((64, 64), bool)
    m[0, 0] = True
    m[63, 5] = True
    tok = ek.texture_token_mask(cfg, m)
    assert tok.shape == (256 + 64,) and tok.sum() == 2 and tok[0] and tok[15 * 16 + 1]


def test_disentangle_train_checkpoint(tiny_cfg, tiny_data):
    torch.manual_seed(0)
    m = FlowDiT(tiny_cfg)
    ck = ek.disentangle_train(m, tiny_data, p=0.0, cfg=TrainConfig(steps=3, batch_size=4, warmup=1, ema_decay=0.0))
    torch.manual_seed(0)
    ref = FlowDiT(tiny_cfg)
    train_model(ref, tiny_data, TrainConfig(steps=3, batch_size=4, warmup=1, ema_decay=0.0))
    assert ck.meta["disentangled"] and ck.meta["p"] == 0.0
    for k, v in ref.state_dict().items():
        assert np.array_equal(ck.params[k], v.numpy()), k
    with pytest.raises(ValueError):
        ek.disentangle_train(m, tiny_data, p=1.5)


def test_group_decode_runs(tiny_model):
    out = ek.group_decode(_portraits(), tiny_model, 1, steps=3)
    assert out.shape == (1, 16, 16, 3)


# ---------------------------------------------------------------------------
# trained-model checks (shared artifacts)


@pytest.fixture(scope="module")
def trained():
    import artifacts

    return artifacts.model(), artifacts.detector(), artifacts.DEFAULTS


def _gcfg(defaults):
    return GuidanceConfig(**defaults["guidance"])


@pytest.mark.slow
def test_ablation_eps_monotone_and_onset_reported(trained):
    import artifacts

    model, det, d = trained
    cond = artifacts.heldout(4, "flat").portraits
    order = ek.layer_order(model.cfg, "single_forward")
    k = len(order) // 2
    totals = []
    for eps in (0.0, 0.25, 0.5, 1.0):
        res = ek.ablation_sweep(cond, model, _gcfg(d), order[:k], eps, seed=0, detector=det)
        totals.append(res.total()[-1])
        if eps == 0.0:
            print(f"ablation onset (eps=0, single_forward): {res.onset} -> order {res.onset_order()}")
    print("total degradation at k=%d for eps 0, .25, .5, 1: %s" % (k, np.round(totals, 5).tolist()))
    assert totals[-1] == 0.0
    assert all(a >= b for a, b in zip(totals, totals[1:])), totals


def _style_pair(style_a, style_b, seed=77):
    from uvflow import toyfaces as tf

    # pick a partner whose landmarks and palette differ clearly from the first sample
    cfg = tf.DatasetConfig(occlusion_prob=0.0)
    a = tf.make_sample(seed, 0, style_a, cfg)
    for j in range(1, 100):
        b = tf.make_sample(seed, j, style_b, cfg)
        if np.linalg.norm(a.landmarks - b.landmarks, axis=-1).mean() > 1.5 and \
                np.abs(np.subtract(a.params.skin_tone, b.params.skin_tone)).sum() > 0.3:
            return a, b
    raise AssertionError("no contrasting pair found")


@pytest.mark.slow
def test_style_transfer_metric_orderings(trained):
    from uvflow.metrics import landmark_l2, palette_hist_distance

    model, det, d = trained
    a, b = _style_pair("flat", "pixel")
    for ident, style in ((a, b), (b, a)):
        out = ek.style_transfer(ident.portrait[None], style.portrait[None], model, det, _gcfg(d), seed=0)[0]
        lm_id = landmark_l2(out, det, ident.landmarks)
        lm_st = landmark_l2(out, det, style.landmarks)
        pal_id = palette_hist_distance(out, ident.layers.t_full)
        pal_st = palette_hist_distance(out, style.layers.t_full)
        print(f"landmark L2 vs identity {lm_id:.3f} / style {lm_st:.3f}; palette dist identity {pal_id:.3f} / "
              f"style {pal_st:.3f}")
        assert lm_id < lm_st
        assert pal_st < pal_id


@pytest.mark.slow
def test_regional_brow_edit_moves_toward_reference(trained):
    import artifacts
    from uvflow import toyfaces as tf
    from uvflow.metrics import masked_l2

    model, det, d = trained
    ds = artifacts.heldout(100, "flat")
    brow, rest = tf.region_masks().brow_mask, ~tf.region_masks().brow_mask
    closer = []
    for i in range(10):
        req = ek.EditRequest(ds.portraits[i], ds.portraits[50 + i], {"brow"})
        out = ek.regional_edit(req, model, det, _gcfg(d), seed=i)
        closer.append(masked_l2(out, ds.textures[50 + i], brow) < masked_l2(ds.textures[i], ds.textures[50 + i], brow))
        fuse = ek.fuse_edit(req, model, det, _gcfg(d), seed=i)
        assert masked_l2(out, ds.textures[i], rest) < masked_l2(fuse, ds.textures[i], rest)
    assert np.mean(closer) >= 0.9
