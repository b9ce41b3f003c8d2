import math

import numpy as np
import pytest

from bidvl import tensor as T
from bidvl.config import TrainConfig
from bidvl.core import (
    AdamState,
    LossReport,
    adam_step,
    build_models,
    joint_energy,
    ll_losses,
    ll_step,
    load_models,
    train,
    ul_energy_loss,
    ul_step,
)
from bidvl.data import DatasetSpec, make_dataset
from bidvl.errors import NumericError
from bidvl.gradcheck import check_seed
from bidvl.nets import encode, energy, generate
from bidvl.tensor import Param, grad_of

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
TINY = (8,)


def _zero(layer):
    layer.W.assign(np.zeros_like(layer.W.data))
    layer.b.assign(np.zeros_like(layer.b.data))


def _constant_energy(models, c=0.0):
    last = models.energy.layers[-1]
    _zero(last)
    last.b.assign(np.array([c]))


def _constant_encoder(models, mean):
    """Encoder with mean ``mean`` everywhere and logvar ~ -2e-9."""
    enc = models.encoder
    _zero(enc.head_mu)
    enc.head_mu.b.assign(np.asarray(mean, dtype=float))
    _zero(enc.head_rawlv)
    enc.head_rawlv.b.assign(np.full(enc.d_h, -500.0))


def _constant_generator(models, out):
    last = models.generator.layers[-1]
    _zero(last)
    last.b.assign(np.arctanh(np.asarray(out, dtype=float)))


def _batch(seed, n=6, d=2):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.9, 0.9, (n, d)), rng.normal(size=(n, d)), rng.normal(size=(n, d))


def _grads(params):
    return [p.grad.copy() for p in params]


# ------------------------------------------------------------ joint energy


def test_joint_energy_at_posterior_mean():
    m = build_models(1, 1, 0, TINY)
    _constant_energy(m)
    _constant_encoder(m, [0.4])
    e = joint_energy(m.eblvm, np.array([[0.1]]), np.array([[0.4]])).item()
    assert e == pytest.approx(HALF_LOG_2PI, abs=1e-8)
    assert HALF_LOG_2PI == pytest.approx(0.9189385, abs=1e-7)


def test_joint_energy_shift_by_constant():
    m = build_models(2, 2, 1, TINY)
    v, h, _ = _batch(1)
    before = joint_energy(m.eblvm, v, h).data
    last = m.energy.layers[-1]
    last.b.assign(last.b.data + 2.5)
    after = joint_energy(m.eblvm, v, h).data
    assert np.allclose(after - before, 2.5, rtol=0, atol=1e-12)


def test_joint_energy_psi_gradient_independent_of_h():
    m = build_models(2, 2, 2, TINY)
    v, h1, h2 = _batch(2)
    psi = m.energy.params()
    g1 = grad_of(lambda: T.sum_(joint_energy(m.eblvm, v, h1)), psi)
    g2 = grad_of(lambda: T.sum_(joint_energy(m.eblvm, v, h2)), psi)
    for a, b in zip(g1, g2):
        assert np.array_equal(a, b)


# -------------------------------------------------------------- lower level


def test_vae_terms_vanish_for_perfect_generator():
    m = build_models(2, 2, 3, TINY)
    _constant_encoder(m, [0.0, 0.0])
    _constant_generator(m, [0.3, -0.6])
    data = np.tile(generate(m.generator, np.zeros((1, 2))).data, (5, 1))
    _, eps, noise = _batch(3, 5)
    rep = ll_step(m, data, eps, noise, TrainConfig())
    assert rep.weighted_recon == 0.0
    assert rep.weighted_klprior == pytest.approx(0.0, abs=1e-15)


def test_constant_energy_gives_zero_chase_gradient():
    m = build_models(2, 2, 4, TINY)
    _constant_energy(m, 1.7)
    v, eps, noise = _batch(4)
    rep = ll_step(m, v, eps, noise, TrainConfig(), terms=("chase",))
    assert rep.energy_chase == pytest.approx(1.7, abs=1e-15)
    assert all(np.array_equal(p.grad, np.zeros_like(p.data)) for p in m.generator.params())


def test_latent_cycle_at_posterior_mean():
    m = build_models(2, 2, 5, TINY)
    c = np.array([0.2, -0.5])
    _constant_generator(m, c)
    g = generate(m.generator, np.zeros((1, 2))).data[0]
    _constant_encoder(m, g)  # q(h|G(h)) centred on h at the evaluation points
    noise = np.tile(g, (4, 1))
    v, eps, _ = _batch(5, 4)
    rep = ll_step(m, v, eps, noise, TrainConfig())
    assert rep.latent_cycle == pytest.approx(2 * HALF_LOG_2PI, abs=1e-8)


def test_ll_step_reduces_to_elbo():
    m = build_models(2, 2, 6, TINY)
    v, eps, noise = _batch(6, 8)
    cfg = TrainConfig(r_basic=1.0, lambda_rec=1.0)
    rep = ll_step(m, v, eps, noise, cfg, terms=("vae",))
    # reference ELBO from the network outputs
    mu, lv = (t.data for t in encode(m.encoder, v))
    h = mu + np.exp(0.5 * lv) * eps
    xhat = generate(m.generator, h).data
    recon = ((v - xhat) ** 2).sum(1).mean()
    kl = (0.5 * (np.exp(lv) + mu**2 - 1.0 - lv).sum(1)).mean()
    assert rep.weighted_recon + rep.weighted_klprior == pytest.approx(recon + kl, abs=1e-12)
    assert rep.energy_chase == 0.0 and rep.latent_cycle == 0.0


def test_ll_step_never_touches_energy():
    m = build_models(2, 2, 7, TINY)
    v, eps, noise = _batch(7)
    ll_step(m, v, eps, noise, TrainConfig(ratio_mode="sigmoid"))
    assert all(np.array_equal(p.grad, np.zeros_like(p.data)) for p in m.energy.params())


def test_offset_cycle_skips_encoder():
    v, eps, noise = _batch(8)
    grads = {}
    for mode in ("offset", "non-offset"):
        m = build_models(2, 2, 8, TINY)
        ll_step(m, v, eps, noise, TrainConfig(grad_mode=mode), terms=("cycle",))
        grads[mode] = _grads(m.encoder.params()), _grads(m.generator.params())
    assert all(np.array_equal(g, np.zeros_like(g)) for g in grads["offset"][0])
    assert any(np.any(g != 0) for g in grads["non-offset"][0])
    for a, b in zip(grads["offset"][1], grads["non-offset"][1]):
        assert np.array_equal(a, b)


def test_ll_step_non_finite_data():
    m = build_models(2, 2, 9, TINY)
    v, eps, noise = _batch(9)
    v[0, 0] = np.nan
    with pytest.raises(NumericError):
        ll_step(m, v, eps, noise, TrainConfig())


# -------------------------------------------------------------- upper level


def test_ul_identical_batches_zero_gradient():
    m = build_models(2, 2, 10, TINY)
    v, _, _ = _batch(10)
    g = grad_of(lambda: ul_energy_loss(m, v, v, TrainConfig())[0], m.energy.params())
    # the two halves cancel up to the order in which the SN paths accumulate
    assert all(np.abs(x).max() <= 1e-15 for x in g)


def test_ul_offset_and_non_offset_share_energy_gradients():
    v, _, noise = _batch(11)
    out = {}
    for mode in ("offset", "non-offset"):
        m = build_models(2, 2, 11, TINY)
        ul_step(m, v, noise, TrainConfig(grad_mode=mode))
        out[mode] = _grads(m.energy.params()), _grads(m.encoder.params())
    for a, b in zip(out["offset"][0], out["non-offset"][0]):
        assert np.array_equal(a, b)
    assert all(np.array_equal(g, np.zeros_like(g)) for g in out["offset"][1])
    assert any(np.any(g != 0) for g in out["non-offset"][1])


def test_ul_step_leaves_generator_alone():
    m = build_models(2, 2, 12, TINY)
    v, _, noise = _batch(12)
    ul_step(m, v, noise, TrainConfig(grad_mode="non-offset"))
    assert all(np.array_equal(p.grad, np.zeros_like(p.data)) for p in m.generator.params())


def test_hinge_clipped_points_contribute_nothing():
    m = build_models(2, 2, 13, TINY)
    _constant_energy(m, -3.0)
    cfg = TrainConfig(energy_loss="hinge")
    v, gen, _ = _batch(13)
    # data at E = -3: ReLU(1 + E) = 0; generated at E = -3: ReLU(1 - E) = 4
    loss, _, _ = ul_energy_loss(m, v, np.clip(gen, -1, 1), cfg)
    assert loss.item() == pytest.approx(4.0, abs=1e-15)
    data_only = grad_of(lambda: T.mean(T.relu(T.add(energy(m.energy, v), 1.0))), m.energy.params())
    assert all(np.array_equal(g, np.zeros_like(g)) for g in data_only)
    last_b = m.energy.layers[-1].b
    (gb,) = grad_of(lambda: ul_energy_loss(m, v, gen, cfg)[0], [last_b])
    assert gb[0] == pytest.approx(-1.0, abs=1e-15)


def test_hinge_generated_point_above_margin_contributes_nothing():
    m = build_models(2, 2, 14, TINY)
    _constant_energy(m, 3.0)
    v, gen, _ = _batch(14)
    gen_only = grad_of(lambda: T.mean(T.relu(T.sub(1.0, energy(m.energy, gen)))), m.energy.params())
    assert all(np.array_equal(g, np.zeros_like(g)) for g in gen_only)


def test_plain_mode_bias_gradient_cancels():
    m = build_models(2, 2, 15, TINY)
    v, gen, _ = _batch(15)
    last_b = m.energy.layers[-1].b
    for shift in (0.0, 2.0, -7.5):
        last_b.assign(np.array([shift]))
        (g,) = grad_of(lambda: ul_energy_loss(m, v, gen, TrainConfig())[0], [last_b])
        assert g[0] == 0.0


def test_hinge_mode_bias_gradient_depends_on_shift():
    m = build_models(2, 2, 16, TINY)
    v, gen, _ = _batch(16)
    last_b = m.energy.layers[-1].b
    cfg = TrainConfig(energy_loss="hinge")
    seen = set()
    for shift in (-5.0, 0.0, 5.0):
        last_b.assign(np.array([shift]))
        (g,) = grad_of(lambda: ul_energy_loss(m, v, gen, cfg)[0], [last_b])
        seen.add(round(float(g[0]), 12))
    assert len(seen) > 1


# -------------------------------------------------------------------- Adam


def test_adam_first_step_is_lr_sign():
    p = Param(np.array([0.5, -1.0, 2.0]))
    p.grad = np.array([3.0, -0.2, 1e-3])
    adam_step(AdamState(), [p], lr=1e-3)
    delta = p.data - np.array([0.5, -1.0, 2.0])
    g = np.array([3.0, -0.2, 1e-3])
    assert np.allclose(delta, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-9, atol=0)
    assert np.allclose(delta, -1e-3 * np.sign(g), rtol=1e-4, atol=0)
    assert np.array_equal(p.grad, np.zeros(3))


def test_adam_zero_gradient_is_noop():
    p = Param(np.array([0.1, 0.2]))
    st = AdamState()
    for _ in range(50):
        adam_step(st, [p], lr=1e-2)
    assert np.array_equal(p.data, [0.1, 0.2])
    assert st.t == 50


def test_adam_deterministic_100_steps():
    def run():
        rng = np.random.default_rng(0)
        p = Param(np.zeros((3, 2)))
        st = AdamState()
        for _ in range(100):
            p.grad = rng.normal(size=(3, 2))
            adam_step(st, [p], lr=1e-3, betas=(0.9, 0.999))
        return p.data.tobytes()

    assert run() == run()


# ------------------------------------------------------------------- train


def _tiny_cfg(**kw):
    base = dict(batch=16, max_iters=5, eval_every=2, dataset_n=256)
    base.update(kw)
    return TrainConfig(**base)


def _tiny_data(cfg):
    return make_dataset(DatasetSpec(cfg.dataset, cfg.dataset_n, cfg.seed))


def test_train_zero_iters_initial_checkpoint_only(tmp_path):
    cfg = _tiny_cfg(max_iters=0)
    res = train(cfg, _tiny_data(cfg), tmp_path, hidden=TINY, keep_checkpoints=True)
    assert res.rows == []
    assert [it for it, _ in res.checkpoints] == [0]
    assert sorted(p.name for p in tmp_path.glob("ckpt_*")) == ["ckpt_0000000.bdvl"]
    ref = build_models(2, cfg.d_h, cfg.seed, TINY).arrays()
    for k, v in res.checkpoints[0][1].items():
        assert np.array_equal(v, ref[k])


def test_train_checkpoint_schedule_and_metrics(tmp_path):
    cfg = _tiny_cfg()
    res = train(cfg, _tiny_data(cfg), tmp_path, hidden=TINY, keep_checkpoints=True)
    assert [it for it, _ in res.checkpoints] == [0, 2, 4, 5]
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",")[0] == "iter" and len(lines) == 6
    assert all(np.isfinite(list(r.values())).all() for r in res.rows)
    it, m = load_models(tmp_path / "ckpt_0000005.bdvl")
    assert it == 5
    for k, v in m.arrays().items():
        assert np.array_equal(v, res.models.arrays()[k])


def test_train_is_deterministic(tmp_path):
    cfg = _tiny_cfg(grad_mode="non-offset", ratio_mode="exp-normalized")
    a = train(cfg, _tiny_data(cfg), tmp_path / "a", hidden=TINY)
    b = train(cfg, _tiny_data(cfg), tmp_path / "b", hidden=TINY)
    assert a.rows == b.rows
    for name in ("metrics.csv", "ckpt_0000005.bdvl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_seed_changes_result():
    cfg = _tiny_cfg()
    a = train(cfg, _tiny_data(cfg), hidden=TINY).models.arrays()
    b = train(cfg.replace(seed=1), _tiny_data(cfg), hidden=TINY).models.arrays()
    assert any(not np.array_equal(a[k], b[k]) for k in a)


def test_train_hinge_and_n_ll_steps():
    cfg = _tiny_cfg(energy_loss="hinge", n_ll_steps=3)
    res = train(cfg, _tiny_data(cfg), hidden=TINY)
    assert len(res.rows) == cfg.max_iters


def test_train_empty_dataset():
    with pytest.raises(NumericError):
        train(_tiny_cfg(), np.zeros((0, 2)), hidden=TINY)


def test_loss_report_total():
    rep = LossReport(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    assert rep.ll_total == 10.0


# --------------------------------------------------------- gradient checks


@pytest.mark.parametrize("seed", range(3))
def test_toy_model_gradients_match_finite_differences(seed):
    rows = check_seed(seed, hidden=(2,), d_v=1, d_h=1, batch=4)
    assert rows and all(r.ok for r in rows), [r for r in rows if not r.ok]


def test_ll_losses_keys():
    m = build_models(2, 2, 17, TINY)
    v, eps, noise = _batch(17)
    assert set(ll_losses(m, v, eps, noise, TrainConfig())) == {
        "weighted_recon",
        "weighted_klprior",
        "energy_chase",
        "latent_cycle",
    }
