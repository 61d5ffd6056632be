import math

import numpy as np
import pytest
import torch

from exprflow.dataset import SyntheticGenConfig, generate_synthetic, split
from exprflow.errors import ConfigurationError, DomainError, ShapeError, ValidationError
from exprflow.head_model import synth_model
from exprflow.i2fet import (I2FETConfig, I2FETModel, LatentSample, LossFlags, TrainConfig, build_model,
                            embed_manifest, export_latents, generate, kl_term, loss_from_outputs, loss_total,
                            reparameterize, train)
from exprflow.text_embed import HashingEmbedder
from oracles import gradcheck

# 0.5 * (-ln 0.64 - 1 + 0.64 + 0.25), evaluated independently
KL_HALF_POINT_EIGHT = 0.16814355129


def tiny_cfg(**kw):
    base = dict(latent_dim=4, hidden=16, text_rows=5, text_dim=6, model_dim=8, heads=2, n_facial_layers=1)
    base.update(kw)
    return I2FETConfig(**base)


def make_batch(cfg, b=4, n_shape=3, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return {"expr": 0.3 * torch.randn(b, cfg.m_tokens, cfg.expr_dim, generator=g, dtype=dtype),
            "pose": 0.1 * torch.randn(b, cfg.m_tokens, cfg.pose_dim, generator=g, dtype=dtype),
            "shape": torch.randn(b, n_shape, generator=g, dtype=dtype),
            "emb": torch.randn(b, cfg.text_rows, cfg.text_dim, generator=g, dtype=dtype)}


@pytest.fixture(scope="module")
def model64():
    model = build_model(tiny_cfg(), seed=3).double().eval()
    return model


def test_encode_shapes_and_positive_sigma(model64):
    batch = make_batch(model64.cfg)
    lat_e, lat_p = model64.encode(batch["expr"], batch["pose"], batch["emb"], torch.Generator().manual_seed(0))
    for lat in (lat_e, lat_p):
        assert lat.mu.shape == (4, 2, 4) and lat.sigma.shape == (4, 2, 4)
        assert (lat.sigma > 0).all()
        assert torch.equal(lat.z_tilde, lat.sigma * lat.z + lat.mu)


def test_default_config_latent_dims():
    cfg = I2FETConfig()
    model = build_model(cfg, seed=0).eval()
    e, th = torch.randn(1, 2, 50), torch.randn(1, 2, 6)
    with torch.no_grad():
        lat_e, lat_p = model.encode(e, th, torch.randn(1, 16, 64))
    assert lat_e.mu.shape == (1, 2, 16) and lat_p.sigma.shape == (1, 2, 16)
    assert model.enc_ifed.cfg.facial_width == 53 and model.dec_ifed.cfg.facial_width == 56
    enc = {id(p) for p in model.enc_ifed.parameters()}
    assert not enc & {id(p) for p in model.dec_ifed.parameters()}


def test_encode_seeded_determinism(model64):
    batch = make_batch(model64.cfg)
    a = model64.encode(batch["expr"], batch["pose"], batch["emb"], torch.Generator().manual_seed(9))
    b = model64.encode(batch["expr"], batch["pose"], batch["emb"], torch.Generator().manual_seed(9))
    for la, lb in zip(a, b):
        assert all(torch.equal(x, y) for x, y in zip(la, lb))


def test_encode_rejects_bad_shapes(model64):
    batch = make_batch(model64.cfg)
    with pytest.raises(ShapeError):
        model64.encode(batch["expr"][..., :49], batch["pose"], batch["emb"])


def test_reparameterize_identities():
    mu, sigma, z = torch.randn(3, 4), torch.rand(3, 4) + 0.1, torch.randn(3, 4)
    assert torch.equal(reparameterize(mu, sigma, torch.zeros(3, 4)), mu)
    assert torch.equal(reparameterize(torch.zeros(3, 4), torch.ones(3, 4), z), z)
    with pytest.raises(ShapeError):
        reparameterize(mu, sigma, torch.randn(4, 3))


def test_reparameterize_monte_carlo():
    n = 100_000
    z = torch.randn(n, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    out = reparameterize(torch.full((n,), 0.3, dtype=torch.float64), torch.full((n,), 2.0, dtype=torch.float64), z)
    assert abs(out.mean().item() - 0.3) < 0.02
    assert abs(out.std().item() - 2.0) < 0.02


def test_kl_values():
    assert kl_term(np.zeros(16), np.ones(16)) == 0.0
    mu = np.zeros(16)
    mu[0] = 1.0
    assert kl_term(mu, np.ones(16)) == pytest.approx(0.5, abs=1e-12)
    assert kl_term([0.5], [0.8]) == pytest.approx(KL_HALF_POINT_EIGHT, abs=1e-10)
    t = kl_term(torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.8], dtype=torch.float64))
    assert t.item() == pytest.approx(KL_HALF_POINT_EIGHT, abs=1e-10)


def test_kl_identity_and_nonnegativity(rng):
    for _ in range(200):
        mu = rng.normal(size=7) * rng.uniform(0, 3)
        sigma = np.exp(rng.normal(size=7))
        kl = kl_term(mu, sigma)
        assert kl >= 0
        assert abs(kl - 0.5 * np.sum(sigma ** 2 + mu ** 2 - 1 - np.log(sigma ** 2))) < 1e-10


@pytest.mark.parametrize("sigma", [[0.0, 1.0], [-0.1, 1.0]])
def test_kl_rejects_nonpositive_sigma(sigma):
    with pytest.raises(DomainError):
        kl_term([0.0, 0.0], sigma)


def test_decoder_condition_and_decode_shapes(model64):
    zt = torch.randn(3, 2, 4, dtype=torch.float64)
    emb = torch.randn(3, 5, 6, dtype=torch.float64)
    cond = model64.decoder_condition(zt, zt, emb)
    assert cond.expr.shape == (3, 2, 50) and cond.pose.shape == (3, 2, 6)
    e_hat, th_hat = model64.decode(zt, zt, cond)
    assert e_hat.shape == (3, 2, 50) and th_hat.shape == (3, 2, 6)
    assert torch.isfinite(e_hat).all() and torch.isfinite(th_hat).all()
    again = model64.decoder_condition(zt, zt, emb)
    assert torch.equal(again.expr, cond.expr)


def test_gradcheck_decoder_condition_wrt_latents(model64):
    g = torch.Generator().manual_seed(4)
    zt_e = torch.randn(2, 2, 4, generator=g, dtype=torch.float64, requires_grad=True)
    zt_p = torch.randn(2, 2, 4, generator=g, dtype=torch.float64, requires_grad=True)
    emb = torch.randn(2, 5, 6, generator=g, dtype=torch.float64)
    w = torch.randn(2, 2, 56, generator=g, dtype=torch.float64)

    def loss():
        c = model64.decoder_condition(zt_e, zt_p, emb)
        return (torch.cat([c.expr, c.pose], -1) * w).sum()
    assert gradcheck(loss, [zt_e, zt_p], n_entries=16) < 1e-4


def test_gradcheck_decode(model64):
    g = torch.Generator().manual_seed(5)
    zt_e = torch.randn(2, 2, 4, generator=g, dtype=torch.float64, requires_grad=True)
    zt_p = torch.randn(2, 2, 4, generator=g, dtype=torch.float64, requires_grad=True)
    ce = torch.randn(2, 2, 50, generator=g, dtype=torch.float64, requires_grad=True)
    cp = torch.randn(2, 2, 6, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 2, 56, generator=g, dtype=torch.float64)

    def loss():
        from exprflow.ifed import ConditionalVectors
        e_hat, th = model64.decode(zt_e, zt_p, ConditionalVectors(ce, cp))
        return (torch.cat([e_hat, th], -1) * w).sum()
    params = [zt_e, zt_p, ce, cp] + list(model64.dec_e.parameters()) + list(model64.dec_p.parameters())
    assert gradcheck(loss, params, n_entries=8) < 1e-4


def test_loss_zero_for_perfect_reconstruction():
    b, m, k = 3, 2, 4
    e = torch.randn(b, m, 50, dtype=torch.float64)
    th = torch.randn(b, m, 6, dtype=torch.float64)
    unit = LatentSample(torch.zeros(b, m, k), torch.ones(b, m, k), torch.zeros(b, m, k), torch.zeros(b, m, k))
    out = {"lat_e": unit, "lat_p": unit, "e_hat": e.clone(), "theta_hat": th.clone()}
    head = synth_model(8, 3, 50, 2, seed=0)
    batch = {"expr": e, "pose": th, "shape": torch.randn(b, 3, dtype=torch.float64)}
    total, comps = loss_from_outputs(out, batch, head.layer(torch.float64), LossFlags(True, True))
    assert total.item() == 0.0
    assert set(comps) >= {"L_e", "L_p", "L_v", "mse_e", "kl_e", "mse_p", "kl_p"}


def test_ablation_flags(model64):
    batch = make_batch(model64.cfg)
    head = synth_model(8, 3, 50, 2, seed=0)
    gen = lambda: torch.Generator().manual_seed(1)  # noqa: E731
    total, comps = loss_total(model64, batch, head, LossFlags(False, False), gen())
    assert total.item() == comps["L_e"].item()
    assert comps["L_p"].item() == 0 and comps["L_v"].item() == 0
    full, fc = loss_total(model64, batch, head, LossFlags(True, True), gen())
    assert full.item() == pytest.approx((fc["L_e"] + fc["L_p"] + fc["L_v"]).item(), abs=1e-12)
    assert fc["L_v"].item() > 0
    assert fc["L_e"].item() == pytest.approx(comps["L_e"].item(), abs=1e-12)


def test_vertex_loss_needs_shape(model64):
    batch = make_batch(model64.cfg)
    del batch["shape"]
    with pytest.raises(ConfigurationError):
        loss_total(model64, batch, synth_model(8, 3, 50, 2, seed=0), LossFlags(True, True))


def test_gradcheck_total_loss_every_parameter(model64):
    batch = make_batch(model64.cfg, b=4, n_shape=3, seed=11)
    layer = synth_model(8, 3, 50, 2, seed=2).layer(torch.float64)

    def loss():
        return loss_total(model64, batch, layer, LossFlags(True, True), torch.Generator().manual_seed(7))[0]
    err = gradcheck(loss, list(model64.parameters()), n_entries=3)
    assert err < 1e-4
    model64.zero_grad()
    loss().backward()
    for name, p in model64.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name


@pytest.mark.parametrize("component", ["L_e", "L_p", "L_v"])
def test_gradcheck_each_component(model64, component):
    batch = make_batch(model64.cfg, b=4, seed=12)
    layer = synth_model(8, 3, 50, 2, seed=2).layer(torch.float64)

    def loss():
        return loss_total(model64, batch, layer, LossFlags(True, True), torch.Generator().manual_seed(3))[1][component]
    params = [model64.dec_e[0].weight, model64.dec_p[-1].bias, model64.enc_e[0].weight, model64.t_p.weight]
    assert gradcheck(loss, params, n_entries=6) < 1e-4


@pytest.fixture(scope="module")
def small_data():
    cfg = SyntheticGenConfig(samples_per_pair=3, seed=0, n_shape=3)
    manifest = split(generate_synthetic(cfg), seed=0)
    emb = embed_manifest(manifest, HashingEmbedder(5, 6))
    return manifest, emb


def _train_once(small_data, seed=0, **kw):
    manifest, emb = small_data
    head = synth_model(8, 3, 50, 2, seed=0)
    model = build_model(tiny_cfg(), seed=seed)
    tc = TrainConfig(epochs=3, batch_size=32, seed=seed, **kw)
    return train(model, manifest, head, tc, embeddings=emb)


def test_training_is_deterministic(small_data):
    m1, log1 = _train_once(small_data)
    m2, log2 = _train_once(small_data)
    assert log1 == log2
    for (k, a), (_, b) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k
    assert len(log1.rows) == 3 and log1.best_epoch in (1, 2, 3)
    assert all(math.isfinite(r["val_total"]) for r in log1.rows)


def test_training_log_csv(tmp_path, small_data):
    _, log = _train_once(small_data, use_vertex_loss=False)
    log.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,train_total") and len(lines) == 4


def test_train_rejects_mismatched_ablation(small_data):
    manifest, emb = small_data
    with pytest.raises(ConfigurationError):
        train(build_model(tiny_cfg(), 0), manifest, None, TrainConfig(epochs=1, ifed_enabled=False,
                                                                       use_vertex_loss=False), embeddings=emb)


def test_train_rejects_unsplit(small_data):
    manifest, emb = small_data
    from exprflow.dataset import DatasetManifest
    raw = DatasetManifest(manifest.samples, manifest.vocab)
    with pytest.raises(ValidationError):
        train(build_model(tiny_cfg(), 0), raw, None, TrainConfig(epochs=1, use_vertex_loss=False), embeddings=emb)


def test_generate_is_seeded(model64):
    x_t = np.random.default_rng(0).normal(size=(5, 6))
    a, b = generate(model64, x_t, 42), generate(model64, x_t, 42)
    assert a == b
    assert a.e0.shape == (50,) and a.theta1.shape == (6,)
    assert not generate(model64, x_t, 43) == a


def test_save_load_round_trip(tmp_path, model64):
    model64.save(tmp_path / "ckpt")
    loaded = I2FETModel.load(tmp_path / "ckpt").double()
    x_t = np.random.default_rng(0).normal(size=(5, 6))
    a, b = generate(model64, x_t, 1), generate(loaded, x_t, 1)
    # archive stores float32
    assert np.abs(a.expression - b.expression).max() < 1e-4


def test_text_only_variant_trains(small_data):
    manifest, emb = small_data
    model = build_model(tiny_cfg(ifed_enabled=False), seed=0)
    model, log = train(model, manifest, None, TrainConfig(epochs=1, ifed_enabled=False, use_vertex_loss=False),
                       embeddings=emb)
    assert len(log.rows) == 1


def test_export_latents(tmp_path, small_data, model64):
    manifest, emb = small_data
    model = build_model(tiny_cfg(), seed=0)
    path = export_latents(model, manifest, emb, tmp_path / "lat.csv", "test")
    rows = path.read_text().splitlines()
    assert len(rows) == 1 + 2 * len(manifest.indices("test"))
    assert rows[0].split(",")[:3] == ["sample", "token", "label"]
