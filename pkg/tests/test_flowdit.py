import json

import numpy as np
import pytest
import torch

from uvflow import ckpt
from uvflow.flowdit import (ConfigError, FlowDiT, ModelConfig, Replace, Scale, TrainConfig, attention_probs,
                            checkpoint_from, choose_group, load_checkpoint, loss_rf, patchify, replay, save_checkpoint,
                            scale_all, train_model, unpatchify)
from uvflow.tensors import seeded


def _inputs(cfg, b=2, seed=0):
    g = seeded(seed)
    s = cfg.image_size
    return torch.randn(b, 3, s, s, generator=g), torch.rand(b, generator=g), torch.rand(b, 3, s, s, generator=g) * 2 - 1


def test_default_param_count_golden():
    assert FlowDiT().n_params() == 3_275_568


def test_patchify_counts_and_order():
    img = torch.arange(64 * 64 * 3, dtype=torch.float32).reshape(1, 3, 64, 64)
    tok = patchify(img, 4)
    assert tok.shape == (1, 256, 48)
    for k in (0, 1, 17, 255):
        bx, by = k % 16, k // 16
        block = img[0, :, 4 * by: 4 * by + 4, 4 * bx: 4 * bx + 4].permute(1, 2, 0).reshape(-1)
        assert torch.equal(tok[0, k], block)
    assert torch.equal(unpatchify(tok, 4, 3), img)


def test_patchify_shape_mismatch():
    with pytest.raises(ValueError):
        patchify(torch.zeros(1, 3, 10, 10), 4)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=62)
    with pytest.raises(ConfigError):
        ModelConfig(token_dim=130)
    with pytest.raises(ConfigError):
        ModelConfig(group_boundaries=(8, 4))
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {"token_dim": 64}}))
    assert ModelConfig.from_file(p).token_dim == 64


def test_forward_pure(tiny_model, tiny_cfg):
    x, t, c = _inputs(tiny_cfg)
    with torch.no_grad():
        assert torch.equal(tiny_model(x, t, c), tiny_model(x, t, c))


def test_eps_one_scaling_is_identity(tiny_model, tiny_cfg):
    x, t, c = _inputs(tiny_cfg)
    with torch.no_grad():
        base = tiny_model(x, t, c)
        assert torch.equal(tiny_model(x, t, c, scale_all(tiny_cfg, 1.0)), base)
        assert torch.equal(tiny_model(x, t, c, scale_all(tiny_cfg, 1.0, mode="logits")), base)


def test_self_replacement_is_identity(tiny_model, tiny_cfg):
    x, t, c = _inputs(tiny_cfg)
    with torch.no_grad():
        v, cache = tiny_model.record_features(x, t, c)
        assert sorted(cache) == list(range(tiny_cfg.n_layers))
        assert torch.equal(v, tiny_model(x, t, c))
        for layers in ([0], [1, 3], list(range(tiny_cfg.n_layers))):
            assert torch.equal(tiny_model(x, t, c, replay(cache, layers)), v)


def test_output_scaling_is_exact(tiny_model, tiny_cfg):
    x, t, c = _inputs(tiny_cfg)
    with torch.no_grad():
        _, base = tiny_model.record_features(x, t, c, layers=[0])
        _, scaled = tiny_model.record_features(x, t, c, {0: Scale(0.3)}, layers=[0])
    assert torch.allclose(scaled[0], 0.3 * base[0], rtol=0, atol=1e-7)


def test_token_masked_replacement(tiny_model, tiny_cfg):
    x, t, c = _inputs(tiny_cfg)
    x2, _, c2 = _inputs(tiny_cfg, seed=1)
    with torch.no_grad():
        _, other = tiny_model.record_features(x2, t, c2, layers=[2])
        _, cache = tiny_model.record_features(x, t, c, {2: Replace(other[2], torch.zeros(32, dtype=torch.bool))},
                                              layers=[2])
        _, own = tiny_model.record_features(x, t, c, layers=[2])
    assert torch.equal(cache[2], own[2])


def test_replace_shape_mismatch(tiny_model, tiny_cfg):
    x, t, c = _inputs(tiny_cfg)
    with pytest.raises(ValueError):
        tiny_model(x, t, c, {0: Replace(torch.zeros(1, 3, 3))})


def test_negative_eps_rejected():
    with pytest.raises(ValueError):
        Scale(-0.1)


def test_attention_rows_sum_to_one(tiny_model, tiny_cfg):
    x, t, c = _inputs(tiny_cfg)
    with torch.no_grad():
        h, _ = tiny_model.embed(x, t, c)
        for blk in tiny_model.blocks:
            q, k = blk.qk(h, tiny_cfg.n_tokens)
            p = attention_probs(q, k, tiny_cfg.heads)
            assert torch.allclose(p.sum(-1), torch.ones(()), atol=1e-6)


def test_zero_weights_output_bias(tiny_cfg):
    m = FlowDiT(tiny_cfg)
    b = torch.linspace(-1, 1, 48)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        m.out.bias.copy_(b)
    x, t, c = _inputs(tiny_cfg)
    out = m(x, t, c)
    expect = unpatchify(b.expand(2, 16, 48), 4, 3)
    assert torch.equal(out, expect)


def test_nan_reports_layer(tiny_model, tiny_cfg):
    x, t, c = _inputs(tiny_cfg)
    with torch.no_grad():
        tiny_model.blocks[1].proj[0].bias[0] = float("nan")
    with pytest.raises(FloatingPointError, match="layer 1"):
        tiny_model(x, t, c)


def test_truncation(tiny_model, tiny_cfg):
    x, t, c = _inputs(tiny_cfg)
    with torch.no_grad():
        assert torch.equal(tiny_model.forward_truncated(x, t, c, 3), tiny_model(x, t, c))
        assert not torch.equal(tiny_model.forward_truncated(x, t, c, 1), tiny_model(x, t, c))
    with pytest.raises(ValueError):
        tiny_model.forward_truncated(x, t, c, 4)


def test_degenerate_boundaries(tiny_cfg):
    cfg = ModelConfig(**{**tiny_cfg.to_dict(), "group_boundaries": [2, 2]})
    m = FlowDiT(cfg).eval()
    x, t, c = _inputs(cfg)
    with torch.no_grad():
        assert torch.equal(m.forward_truncated(x, t, c, 1), m.forward_truncated(x, t, c, 2))


def test_loss_zero_with_exact_velocity():
    g = seeded(3)
    x0 = torch.rand(4, 3, 8, 8, generator=g)
    cond = torch.rand(4, 3, 8, 8)
    rec = {}

    def oracle(xt, t, c):
        # recover eps from x_t given the (known) x0: eps = (x_t - (1-t) x0) / t
        tb = t[:, None, None, None]
        x0s = x0 * 2 - 1
        rec["target"] = (xt - (1 - tb) * x0s) / tb - x0s
        return rec["target"]

    assert loss_rf(oracle, x0, cond, g).item() < 1e-10


def test_loss_with_zero_model_matches_direct():
    x0 = torch.rand(8, 3, 8, 8, generator=seeded(1))
    cond = torch.zeros_like(x0)
    loss = loss_rf(lambda xt, t, c: torch.zeros_like(xt), x0, cond, seeded(5))
    g = seeded(5)
    torch.rand(8, generator=g)
    eps = torch.randn(x0.shape, generator=g)
    assert torch.allclose(loss, ((eps - (x0 * 2 - 1)) ** 2).mean())


def test_loss_deterministic(tiny_model, tiny_cfg):
    x0 = torch.rand(2, 3, 16, 16)
    c = torch.rand(2, 3, 16, 16)
    assert loss_rf(tiny_model, x0, c, seeded(4)) == loss_rf(tiny_model, x0, c, seeded(4))


def test_loss_gradient_finite_differences():
    cfg = ModelConfig(image_size=8, patch_size=4, token_dim=8, heads=2, n_double=1, n_single=1,
                      group_boundaries=(1, 1), time_dim=8, cond_tokens=4, mlp_ratio=2)
    torch.manual_seed(0)
    m = FlowDiT(cfg).double()
    with torch.no_grad():
        m.out.weight.normal_(0, 0.3)
    x0 = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    c = torch.rand(2, 3, 8, 8, dtype=torch.float64)

    def loss():
        g = seeded(9)
        xs = x0 * 2 - 1
        t = torch.rand(2, generator=g, dtype=torch.float64)
        eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
        tb = t[:, None, None, None]
        return ((m((1 - tb) * xs + tb * eps, t, c * 2 - 1) - (eps - xs)) ** 2).mean()

    m.zero_grad()
    loss().backward()
    for name in ("blocks.0.qkv.0.weight", "blocks.1.mlp.0.weight", "x_embed.weight", "out.weight"):
        p = dict(m.named_parameters())[name]
        idx = (0,) * p.ndim
        h = 1e-6
        with torch.no_grad():
            p[idx] += h
            lp = loss().item()
            p[idx] -= 2 * h
            lm = loss().item()
            p[idx] += h
        fd = (lp - lm) / (2 * h)
        an = p.grad[idx].item()
        assert abs(fd - an) <= 1e-3 * max(abs(fd), 1e-8), (name, fd, an)


def test_choose_group_order():
    g = seeded(0)
    assert all(choose_group(1.0, g) == 1 for _ in range(20))
    assert all(choose_group(0.0, g) == 3 for _ in range(20))
    groups = [choose_group(0.3, seeded(i)) for i in range(2000)]
    assert abs(groups.count(1) / 2000 - 0.3) < 0.04
    assert abs(groups.count(2) / 2000 - 0.21) < 0.04


def _train(cfg_model, data, **kw):
    torch.manual_seed(0)
    m = FlowDiT(cfg_model)
    st = train_model(m, data, TrainConfig(steps=4, batch_size=4, warmup=2, ema_decay=0.0, **kw), log_every=2)
    return m, st


def test_p_zero_equals_plain_training(tiny_cfg, tiny_data):
    a, _ = _train(tiny_cfg, tiny_data)
    b, sb = _train(tiny_cfg, tiny_data, disentangle=True, p=0.0)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert b.disentangled and {g for _, g, _ in sb.history} == {3}


def test_p_one_always_truncates_at_first_boundary(tiny_cfg, tiny_data):
    _, st = _train(tiny_cfg, tiny_data, disentangle=True, p=1.0)
    assert {g for _, g, _ in st.history} == {1}


def test_disentangle_needs_layered_targets(tiny_cfg, tiny_data):
    tiny_data.t_skin = None
    with pytest.raises(ValueError):
        _train(tiny_cfg, tiny_data, disentangle=True)


def test_checkpoint_round_trip_bytes(tmp_path, tiny_cfg, tiny_data):
    m, st = _train(tiny_cfg, tiny_data, disentangle=True, p=0.5)
    c = checkpoint_from(m, st, {"note": "x"})
    save_checkpoint(c, tmp_path / "a.ckpt")
    c2 = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(c2, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert c2.step == 4 and c2.meta["disentangled"] and c2.model().disentangled
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(c2.model()(x, 0.5, x), c.model()(x, 0.5, x))


def test_checkpoint_errors(tmp_path, tiny_cfg, tiny_data):
    m, st = _train(tiny_cfg, tiny_data)
    p = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint_from(m, st), p)
    raw = bytearray(p.read_bytes())
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXX" + bytes(raw[6:]))
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(bytes(raw[:-10]))
    with pytest.raises(ckpt.CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(ckpt.CheckpointError, match="x_embed.weight|x_pos"):
        load_checkpoint(p, expect=ModelConfig(**{**tiny_cfg.to_dict(), "token_dim": 64}))


def test_training_resumes_identically(tmp_path, tiny_cfg, tiny_data):
    cfg = TrainConfig(steps=6, batch_size=4, warmup=2, ema_decay=0.9, disentangle=True, p=0.4)
    torch.manual_seed(0)
    a = FlowDiT(tiny_cfg)
    sa = train_model(a, tiny_data, cfg)
    torch.manual_seed(0)
    b = FlowDiT(tiny_cfg)
    sb = train_model(b, tiny_data, cfg, stop_at=3)
    save_checkpoint(checkpoint_from(b, sb), tmp_path / "half.ckpt")
    sb = load_checkpoint(tmp_path / "half.ckpt").resume(cfg)
    train_model(sb.model, tiny_data, cfg, sb)
    for k, v in a.state_dict().items():
        assert torch.equal(v, sb.model.state_dict()[k]), k
    for k, v in sa.ema.items():
        assert torch.equal(v, sb.ema[k]), k
