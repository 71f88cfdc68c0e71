import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mlct import autodiff as ad
from mlct.clustering import build_dictionary, query
from mlct.netcore import BackboneConfig, consistency_apply, init_backbone
from mlct.schedule import NoiseSchedule, dpmpp_coeffs, karras_grid
from mlct.trainer import (
    ConsistencyTrainer,
    TrainConfig,
    consistency_loss,
    consistency_train_step,
    pseudo_huber,
    sample_adjacent_pair,
    simulate_cfg_target,
)
from gradcheck import fd_check

VP = NoiseSchedule()
D, DC = 8, 5


def net(cluster=False, seed=0, dtype=np.float64, randomise=True):
    cfg = BackboneConfig(D, 16, 2, 8, DC, D if cluster else 0, 4)
    p = init_backbone(cfg, seed, dtype)
    if randomise:
        rng = np.random.default_rng(seed + 1)
        for k in ("out.w", "out.b"):
            p[k][...] = rng.normal(0, 0.3, p[k].shape)
        if cluster:
            for k in p:
                if "fuse" in k:
                    p[k][...] = rng.normal(0, 0.3, p[k].shape)
    return p


def toy_batch(B=4, seed=0):
    rng = np.random.default_rng(seed)
    x_eps = np.clip(rng.normal(0, 0.5, (B, D)), -1, 1)
    cond = rng.normal(size=(B, DC))
    grid = karras_grid()
    i = rng.integers(1, 50, B)
    return x_eps, cond, grid.times[i], grid.times[i - 1], rng.standard_normal((B, D))


# pair sampling

def test_pair_n2_is_only_pair():
    g = karras_grid(0.002, 1.0, 2)
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert sample_adjacent_pair(g, rng) == (1.0, 0.002)


def test_pair_uniform_chi_square():
    g = karras_grid()
    rng = np.random.default_rng(0)
    pos = {t: i for i, t in enumerate(g.times)}
    counts = np.zeros(50, int)
    for _ in range(100_000):
        t_i, t_prev = sample_adjacent_pair(g, rng)
        i = pos[t_i]
        assert pos[t_prev] == i - 1 and t_prev < t_i
        counts[i] += 1
    assert counts[0] == 0
    obs = counts[1:]
    expected = 100_000 / 49
    sd = math.sqrt(expected * (1 - 1 / 49))
    assert np.all(np.abs(obs - expected) <= 3 * sd + 1) or stats.chisquare(obs).pvalue > 1e-3
    assert stats.chisquare(obs).pvalue > 1e-3


# guided target

def test_cfg_target_cases():
    x = np.array([0.2, -0.9, 1.0])
    u = np.array([0.5, 0.5, -1.0])
    assert np.array_equal(simulate_cfg_target(x, None, 0.5, 0.0, uncond=u), x)
    for w in (0.5, 4.0, 20.0):
        assert np.allclose(simulate_cfg_target(x, None, 0.5, w, uncond=x), x)
    assert simulate_cfg_target(np.array([0.5]), None, 0.5, 4.0, uncond=np.array([0.3]))[0] == 1.0
    out = simulate_cfg_target(x, None, 0.5, 3.0, uncond=u)
    assert np.all(np.abs(out) <= 1.0)


def test_cfg_target_uses_online_unconditional_branch():
    p = net()
    x_eps, cond, t_i, _, z = toy_batch(1)
    x_t = VP.alpha(t_i[0]) * x_eps + VP.sigma(t_i[0]) * z
    a = simulate_cfg_target(x_eps, x_t, t_i[0], 4.0, p)
    u = consistency_apply(p, x_t, t_i[0], None)
    assert np.allclose(a, np.clip(5 * x_eps - 4 * u, -1, 1))
    with pytest.raises(ValueError):
        simulate_cfg_target(x_eps, x_t, 0.5, 4.0)


# distance

def test_pseudo_huber_cases():
    assert pseudo_huber(np.ones(3), np.ones(3), 0.1) == 0.0
    assert pseudo_huber(np.array([3.0]), np.array([0.0]), 4.0) == pytest.approx(1.0, abs=1e-15)
    a = np.array([3000.0, 4000.0])
    assert abs(pseudo_huber(a, np.zeros(2), 5.0) - 5000.0) / 5000.0 < 1e-3
    with pytest.raises(ValueError):
        pseudo_huber(np.ones(2), np.ones(3), 1.0)
    with pytest.raises(ValueError):
        pseudo_huber(np.ones(2), np.ones(2), 0.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(1e-4, 10))
def test_pseudo_huber_non_negative(v, c):
    assert pseudo_huber(np.array(v), np.zeros(len(v)), c) >= 0.0


# loss

def _S_cond(p, x_eps, cond, t_i, z, d=None):
    x_t = VP.alpha_sigma(t_i)[0][:, None] * x_eps + VP.alpha_sigma(t_i)[1][:, None] * z
    ref = None
    if d is not None:
        ref = query(cond, d, p["cluster.aff_w"], p["cluster.aff_b"]).reshape(len(x_eps), -1)
    return consistency_apply(p, x_t, t_i, cond, ref)


def test_self_cancellation_leaves_only_uncond_term():
    p = net()
    x_eps, cond, t_i, t_prev, z = toy_batch()
    same = _S_cond(p, x_eps, cond, t_i, z)
    loss, _, parts = consistency_loss(p, p, x_eps, cond, t_i, t_prev, z, VP, 4.0, 0.01, fixed_target=same)
    assert parts["consistency"] == pytest.approx(0.0, abs=1e-12)
    assert float(loss.value) == pytest.approx(parts["uncond"], abs=1e-12)


def test_halving_delta_doubles_consistency_term():
    p = net()
    x_eps, cond, _, _, z = toy_batch(1)
    t_i = np.array([0.5])
    tgt = np.zeros((1, D))
    _, _, a = consistency_loss(p, p, x_eps, cond, t_i, np.array([0.3]), z, VP, 4.0, 0.01, fixed_target=tgt)
    _, _, b = consistency_loss(p, p, x_eps, cond, t_i, np.array([0.4]), z, VP, 4.0, 0.01, fixed_target=tgt)
    assert b["consistency"] == pytest.approx(2 * a["consistency"], rel=1e-12)


@pytest.mark.parametrize("cluster", [False, True])
def test_full_loss_gradient_check(cluster):
    p = net(cluster=cluster)
    x_eps, cond, t_i, t_prev, z = toy_batch(3, seed=2)
    d = None
    if cluster:
        rng = np.random.default_rng(5)
        d = build_dictionary(rng.normal(size=(6, DC)), rng.normal(size=(6, 2, 4)), 3)
        d.keys = d.keys.astype(np.float64)
        d.values = d.values.astype(np.float64)
    tgt = np.random.default_rng(9).normal(size=(3, D)) * 0.5
    names = list(p.names())

    def build(tape, V):
        from mlct.netcore import ModelParams
        q = ModelParams({k: V[k].value for k in names}, p.meta)
        loss, t2, _ = consistency_loss(q, q, x_eps, cond, t_i, t_prev, z, VP, 4.0, 0.05, d, fixed_target=tgt)
        return loss

    # fd_check rebuilds on its own tapes; compare against the loss tape gradient directly
    loss, tape, _ = consistency_loss(p, p, x_eps, cond, t_i, t_prev, z, VP, 4.0, 0.05, d, fixed_target=tgt)
    grads = tape.grad(loss)
    rng = np.random.default_rng(0)
    h, worst = 1e-5, 0.0
    for _ in range(100):
        k = names[rng.integers(len(names))]
        idx = tuple(rng.integers(0, s) for s in p[k].shape)
        vals = []
        for sgn in (1, -1):
            q = p.copy()
            q[k][idx] += sgn * h
            vals.append(float(consistency_loss(q, q, x_eps, cond, t_i, t_prev, z, VP, 4.0, 0.05, d,
                                               fixed_target=tgt)[0].value))
        num = (vals[0] - vals[1]) / (2 * h)
        an = float(grads[k][idx])
        worst = max(worst, abs(an - num) / max(abs(an), abs(num), 1e-6))
    assert worst <= 1e-4


def test_stopgrad_routing():
    online = net(seed=0)
    target = net(seed=3)
    x_eps, cond, t_i, t_prev, z = toy_batch()
    loss_a, tape_a, _ = consistency_loss(online, target, x_eps, cond, t_i, t_prev, z, VP, 4.0, 0.05)
    # only online leaves are on the tape
    assert set(tape_a.leaves) == set(online.names())
    ga = tape_a.grad(loss_a)
    # a different target changes the value but the gradient still only reaches online parameters
    target2 = net(seed=4)
    loss_b, tape_b, parts_b = consistency_loss(online, target2, x_eps, cond, t_i, t_prev, z, VP, 4.0, 0.05)
    assert float(loss_a.value) != float(loss_b.value)
    assert set(tape_b.grad(loss_b)) == set(online.names())
    # the target branch enters as a constant: replacing it by its own value leaves gradients unchanged
    loss_c, tape_c, _ = consistency_loss(online, target2, x_eps, cond, t_i, t_prev, z, VP, 4.0, 0.05,
                                         fixed_target=parts_b["target"])
    gb, gc = tape_b.grad(loss_b), tape_c.grad(loss_c)
    for k in gb:
        assert np.array_equal(gb[k], gc[k])
    assert any(not np.array_equal(ga[k], gb[k]) for k in ga)


def test_omega_zero_is_vanilla_consistency_training():
    p = net(seed=1)
    tgt_net = net(seed=2)
    x_eps, cond, t_i, t_prev, z = toy_batch(5, seed=3)
    c = 0.05
    loss, _, parts = consistency_loss(p, tgt_net, x_eps, cond, t_i, t_prev, z, VP, 0.0, c)
    al, sl = VP.alpha_sigma(t_i)
    x_t = al[:, None] * x_eps + sl[:, None] * z
    a, b = dpmpp_coeffs(t_i, t_prev, VP)
    x_prev = a[:, None] * x_t + b[:, None] * x_eps
    S = consistency_apply(p, x_t, t_i, cond)
    S_unc = consistency_apply(p, x_t, t_i, None)
    T = consistency_apply(tgt_net, x_prev, t_prev, cond)
    cons = np.mean([pseudo_huber(S[j], T[j], c) / (t_i[j] - t_prev[j]) for j in range(5)])
    unc = np.mean([pseudo_huber(S_unc[j], x_eps[j], c) for j in range(5)])
    assert parts["consistency"] == pytest.approx(cons, rel=1e-9)
    assert parts["uncond"] == pytest.approx(unc, rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 8.0))
def test_loss_terms_non_negative(seed, omega):
    p = net(seed=seed % 7)
    x_eps, cond, t_i, t_prev, z = toy_batch(3, seed=seed)
    _, _, parts = consistency_loss(p, p, x_eps, cond, t_i, t_prev, z, VP, omega, 0.01)
    assert parts["consistency"] >= 0 and parts["uncond"] >= 0


# trainer

def _trainer(steps=5, seed=0, cluster=True, dtype=np.float32, **kw):
    rng = np.random.default_rng(0)
    lat = np.clip(rng.normal(0, 0.4, (20, D)), -1, 1)
    cond = np.repeat(np.eye(2, DC), 10, axis=0) + 0.0
    d = build_dictionary(cond, lat.reshape(20, 2, 4), 2) if cluster else None
    online = init_backbone(BackboneConfig(D, 16, 2, 8, DC, D if cluster else 0, 4), seed, dtype)
    cfg = TrainConfig(lr=1e-3, steps=steps, batch=8, seed=seed, **kw)
    return ConsistencyTrainer(online, lat, cond, cfg, VP, d)


def test_training_is_bit_reproducible():
    a, b = _trainer(), _trainer()
    a.train()
    b.train()
    for k in a.online:
        assert np.array_equal(a.online[k], b.online[k])
        assert np.array_equal(a.target[k], b.target[k])
    assert a.log.rows[-1][:4] == b.log.rows[-1][:4]


def test_boundary_identity_after_training():
    tr = _trainer(steps=10)
    tr.train()
    x = np.random.default_rng(1).normal(size=(3, D)).astype(np.float32)
    assert np.array_equal(consistency_apply(tr.online, x, 0.0, tr.cond[:3]), x)
    assert tr.online.all_finite()


def test_step_updates_online_and_ema():
    tr = _trainer(gamma=0.5)
    before_on = tr.online.copy()
    before_tg = tr.target.copy()
    out = consistency_train_step(tr)
    assert set(out) == {"step", "consistency", "uncond", "grad_norm"}
    k = "out.w"  # the only layer with a non-zero gradient on the first step
    assert not np.array_equal(tr.online[k], before_on[k])
    assert np.allclose(tr.target[k], 0.5 * before_tg[k] + 0.5 * tr.online[k], atol=1e-7)


def test_nan_loss_aborts():
    tr = _trainer()
    tr.latents[:] = np.nan
    with pytest.raises(FloatingPointError, match="step 0"):
        tr.step()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(omega=-1)
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.5)
    with pytest.raises(ValueError):
        TrainConfig(huber_c=0.0)
    assert TrainConfig().huber(64) == pytest.approx(0.00054 * 8)


def test_csv_log(tmp_path):
    tr = _trainer(steps=3)
    tr.train()
    tr.log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,consistency_loss,uncond_loss,grad_norm"
    assert len(lines) == 4


def test_uncond_loss_approaches_bayes_floor():
    """5k steps on a 2-class corpus.

    The unconditional branch regresses x_eps from x_t without the label, so
    at high noise its target is ambiguous.  The best possible predictor is
    the posterior mean over the training latents; its loss on the same
    batches is the floor.  On this corpus that floor is about a quarter of
    the initial loss, so a "below 10% of initial" target cannot be met; we
    check the floor is above 10% and that training gets close to it.
    """
    from mlct.codec import latent
    from mlct.data import embed_labels
    from mlct.oracle import exact_denoiser
    from mlct.pipeline import RunConfig, fit_codec, fit_dictionary, prepare_data
    from mlct.schedule import skip_coeffs
    from mlct.trainer import draw_batch

    cfg = RunConfig(classes=2, items_per_class=60, codec_width=32, codec_steps=300, width=64, blocks=2,
                    lr=1e-3, steps=5000, batch=32, gamma=0.99, huber_c=0.3)
    data = prepare_data(cfg)
    codec = fit_codec(cfg, data)
    lat = latent(codec, data.train.items)
    online = init_backbone(cfg.backbone_config(True), 0)
    tr = ConsistencyTrainer(online, lat, embed_labels(data.train.labels, data.embeddings), cfg.train_config(),
                            cfg.schedule(), fit_dictionary(cfg, data, lat))
    tr.train()
    u = tr.log.column("uncond_loss")

    lat64 = lat.astype(np.float64)
    c = tr.huber_c
    init, floor = [], []
    for step in list(range(20)) + list(range(4800, 5000)):
        sb = draw_batch(tr.cfg, tr.grid, len(lat), lat.shape[1], step, np.float64)
        x = lat64[sb.idx]
        t = tr.grid.times[sb.pair]
        al, sl = VP.alpha_sigma(t)
        x_t = al[:, None] * x + sl[:, None] * sb.z
        best = np.stack([exact_denoiser(x_t[j], t[j], lat64, VP) for j in range(len(t))])
        row = lambda a: np.mean(np.sqrt(((a - x) ** 2).sum(1) + c * c) - c)
        if step < 20:
            init.append(row(skip_coeffs(t)[0][:, None] * x_t))
        else:
            floor.append(row(best))
    # the zero-initialised network is exactly the c_skip-only predictor
    assert u[0] == pytest.approx(init[0], rel=1e-4)
    assert np.mean(floor) > 0.1 * np.mean(init)
    assert u[-200:].mean() <= 1.5 * np.mean(floor)
