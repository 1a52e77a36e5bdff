import math

import numpy as np
import pytest

from bevda.bev_raster import BevImage
from bevda.cyclegan import (
    CycleGAN,
    CycleGanConfig,
    DiscriminatorNet,
    GeneratorNet,
    ImagePool,
    LossReport,
    adv_loss,
    cycle_loss,
    discriminator_loss,
    frozen,
    generator_adv_loss,
    translate,
)
from bevda.engine import Tensor, mul

from gradcheck import check

TINY = dict(base_width=2, n_res_blocks=1, image_size=16, channels=3)


def batch(rng, n=1, c=3, size=16):
    return np.tanh(rng.normal(size=(n, c, size, size)))


def zero_head(disc):
    disc.params["head.weight"].data[...] = 0.0
    disc.params["head.bias"].data[...] = 0.0
    return disc


class ConstDisc:
    """Outputs +100 on inputs with positive mean, -100 otherwise."""

    def __call__(self, x):
        v = 100.0 if x.data.mean() > 0 else -100.0
        return Tensor(np.full((x.shape[0], 1, 2, 2), v))


# ---------------------------------------------------------------------------
# architecture

def test_generator_shape_and_range():
    rng = np.random.default_rng(0)
    gen = GeneratorNet(3, 4, 2, rng)
    for scale in (1.0, 100.0):
        x = Tensor(scale * rng.normal(size=(2, 3, 16, 16)))
        y = gen(x).data
        assert y.shape == x.shape
        assert np.all(np.abs(y) <= 1.0)


def test_discriminator_patch_map():
    disc = DiscriminatorNet(3, 4, np.random.default_rng(1))
    assert disc(Tensor(np.zeros((2, 3, 80, 80)))).shape == (2, 1, 10, 10)


def test_generator_channel_mismatch():
    with pytest.raises(ValueError):
        GeneratorNet(3, 2, 1)(Tensor(np.zeros((1, 1, 16, 16))))


def test_config_invariants():
    with pytest.raises(ValueError):
        CycleGanConfig(lambda_cyc=0.0)
    with pytest.raises(ValueError):
        CycleGanConfig(lr=0.0)


# ---------------------------------------------------------------------------
# adversarial loss

def test_zero_logit_discriminator_losses():
    rng = np.random.default_rng(2)
    gen = GeneratorNet(3, 2, 1, rng)
    disc = zero_head(DiscriminatorNet(3, 2, rng))
    g, d = adv_loss(gen, disc, batch(rng), batch(rng))
    assert d.item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert g.item() == pytest.approx(math.log(2), abs=1e-12)


def test_perfect_discriminator_loss_vanishes():
    real = Tensor(np.ones((1, 3, 16, 16)))
    fake = Tensor(-np.ones((1, 3, 16, 16)))
    assert discriminator_loss(ConstDisc(), real, fake).item() < 1e-40


def test_adv_loss_shape_mismatch():
    rng = np.random.default_rng(3)
    gen, disc = GeneratorNet(3, 2, 1, rng), DiscriminatorNet(3, 2, rng)
    with pytest.raises(ValueError):
        adv_loss(gen, disc, batch(rng, 2), batch(rng, 1))


def test_generator_grad_never_reaches_disc_and_back():
    from bevda.engine import Tape, backward

    rng = np.random.default_rng(4)
    gen, disc = GeneratorNet(3, 2, 1, rng), DiscriminatorNet(3, 2, rng)
    with Tape() as tape:
        g, d = adv_loss(gen, disc, batch(rng), batch(rng))
    backward(g, tape)
    assert all(p.grad is None for p in disc.params.values())
    assert any(p.grad is not None and np.any(p.grad) for p in gen.params.values())
    gen.zero_grad()
    with Tape() as tape:
        g, d = adv_loss(gen, disc, batch(rng), batch(rng))
    backward(d, tape)
    assert all(p.grad is None for p in gen.params.values())


def _some_params(net, names):
    return [net.params[n] for n in names]


@pytest.mark.parametrize("seed", range(3))
def test_gen_adv_loss_gradcheck_toy(seed):
    rng = np.random.default_rng(10 + seed)
    gen = GeneratorNet(3, 2, 1, rng)
    disc = DiscriminatorNet(3, 2, rng)
    a = Tensor(batch(rng, size=8))
    names = ["enc0.weight", "enc2.weight", "res0.b.weight", "dec1.weight", "out.weight", "out.bias"]
    params = _some_params(gen, names)

    def build(*ps):
        saved = [gen.params[n] for n in names]
        for n, p in zip(names, ps):
            gen.params[n] = p
        try:
            with frozen(disc):
                return generator_adv_loss(disc, gen(a))
        finally:
            for n, p in zip(names, saved):
                gen.params[n] = p

    assert check(build, params, sample=24, seed=seed) < 1e-3


# ---------------------------------------------------------------------------
# cycle loss

def test_cycle_identity_generators_zero():
    rng = np.random.default_rng(5)
    ident = lambda x: x  # noqa: E731
    assert cycle_loss(ident, ident, batch(rng), batch(rng)).item() == 0.0


def test_cycle_negate_generators_zero():
    rng = np.random.default_rng(6)
    neg = lambda x: mul(x, -1.0)  # noqa: E731
    assert cycle_loss(neg, neg, batch(rng), batch(rng)).item() == 0.0


def test_cycle_linear_generators_hand_computed():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a1, b1, a2, b2 = rng.normal(size=4)
        s, r = batch(rng), batch(rng)
        f = lambda x: mul(x, a1) + b1  # noqa: E731
        g = lambda x: mul(x, a2) + b2  # noqa: E731
        expected = np.mean(np.abs(a2 * (a1 * s + b1) + b2 - s)) + np.mean(np.abs(a1 * (a2 * r + b2) + b1 - r))
        assert abs(cycle_loss(f, g, s, r).item() - expected) <= 1e-12


# ---------------------------------------------------------------------------
# training step

def make_gan(seed=0, **kw):
    return CycleGAN(CycleGanConfig(seed=seed, **{**TINY, **kw}))


def run(gan, steps, seed=0):
    rng = np.random.default_rng(seed)
    return [gan.train_step(batch(rng), batch(rng)) for _ in range(steps)]


def test_total_composition_identity_every_step():
    gan = make_gan()
    for rep in run(gan, 5):
        assert abs(rep.total - (rep.adv_s2r + rep.adv_r2s + 10.0 * rep.cyc)) <= 1e-12


def test_identical_seed_bit_identical_reports():
    a, b = run(make_gan(3), 4), run(make_gan(3), 4)
    assert [r.csv_row() for r in a] == [r.csv_row() for r in b]
    assert run(make_gan(4), 1)[0].csv_row() != a[0].csv_row()


def test_generator_phase_leaves_discriminators_alone():
    gan = make_gan()
    before = {k: n.checksum() for k, n in gan.nets.items()}
    rng = np.random.default_rng(0)
    gan.train_step(batch(rng), batch(rng), update_discriminators=False)
    after = {k: n.checksum() for k, n in gan.nets.items()}
    assert after["d_s."] == before["d_s."] and after["d_r."] == before["d_r."]
    assert after["g_s2r."] != before["g_s2r."]


def test_discriminator_phase_leaves_generators_alone():
    a, b = make_gan(), make_gan()
    rng_a, rng_b = np.random.default_rng(1), np.random.default_rng(1)
    a.train_step(batch(rng_a), batch(rng_a), update_discriminators=False)
    b.train_step(batch(rng_b), batch(rng_b), update_discriminators=True)
    assert a.g_s2r.checksum() == b.g_s2r.checksum()
    assert a.g_r2s.checksum() == b.g_r2s.checksum()
    assert a.d_r.checksum() != b.d_r.checksum()


def _generator_delta_from_adv_only(gan, s, r):
    """Adam step on the pure adversarial generator objective, on a copy of the state."""
    from bevda.engine import Tape, backward

    clone = make_gan()
    clone.load_state_arrays(gan.state_arrays())
    before = {k: v.copy() for k, v in clone.state_arrays().items() if k.startswith("g_")}
    with Tape() as tape, frozen(clone.d_s, clone.d_r):
        loss = generator_adv_loss(clone.d_r, clone.g_s2r(Tensor(s))) + \
            generator_adv_loss(clone.d_s, clone.g_r2s(Tensor(r)))
    backward(loss, tape)
    clone.opt_g.step()
    return {k: clone.state_arrays()[k] - before[k] for k in before}


@pytest.mark.parametrize("zero_logits", [True, False])
def test_term_isolation_lambda_zero(zero_logits):
    gan = make_gan()
    # lambda = 0 is outside the config invariant; set it after validation
    gan.config.lambda_cyc = 0.0
    if zero_logits:
        zero_head(gan.d_s)
        zero_head(gan.d_r)
    rng = np.random.default_rng(2)
    s, r = batch(rng), batch(rng)
    expected = _generator_delta_from_adv_only(gan, s, r)
    before = {k: v.copy() for k, v in gan.state_arrays().items() if k.startswith("g_")}
    gan.train_step(s, r, update_discriminators=False)
    for k in expected:
        np.testing.assert_array_equal(gan.state_arrays()[k] - before[k], expected[k])
    if zero_logits:
        assert not any(np.any(v) for v in expected.values())


@pytest.mark.parametrize("seed", range(20))
def test_composite_generator_loss_gradcheck(seed):
    """Gradient of adv_s2r + adv_r2s + 10 * cyc w.r.t. generator weights."""
    assert CycleGanConfig().lambda_cyc == 10.0
    rng = np.random.default_rng(200 + seed)
    gan = make_gan(seed, image_size=8)
    s, r = Tensor(batch(rng, size=8)), Tensor(batch(rng, size=8))
    pick = [("g_s2r", "enc0.weight"), ("g_s2r", "out.bias"), ("g_r2s", "dec0.weight"), ("g_r2s", "res0.a.weight")]
    params = [getattr(gan, net).params[name] for net, name in pick]

    def build(*ps):
        saved = [getattr(gan, net).params[name] for net, name in pick]
        for (net, name), p in zip(pick, ps):
            getattr(gan, net).params[name] = p
        try:
            return gan.generator_objective(s, r)[3]
        finally:
            for (net, name), p in zip(pick, saved):
                getattr(gan, net).params[name] = p

    assert check(build, params, sample=24, seed=seed) < 1e-3


def test_state_round_trip_resumes_identically():
    a = make_gan(5)
    run(a, 3, seed=1)
    b = make_gan(5)
    b.load_state_arrays(a.state_arrays())
    rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
    ra = a.train_step(batch(rng_a), batch(rng_a))
    rb = b.train_step(batch(rng_b), batch(rng_b))
    assert ra.csv_row() == rb.csv_row() and a.step == b.step == 4


def test_image_pool():
    pool = ImagePool(2)
    rng = np.random.default_rng(0)
    imgs = [np.full((1, 2, 2), float(i)) for i in range(6)]
    out0 = pool.query(np.stack(imgs[:2]), rng)
    np.testing.assert_array_equal(out0, np.stack(imgs[:2]))
    for im in imgs[2:]:
        out = pool.query(im[None], rng)
        assert out.shape == (1, 1, 2, 2)
    assert len(pool.images) == 2
    np.testing.assert_array_equal(ImagePool(0).query(imgs[0][None], rng), imgs[0][None])


def test_loss_report_csv():
    rep = LossReport(3, 0.5, 0.25, 0.125, 1.875)
    assert LossReport.CSV_HEADER == "step,adv_s2r,adv_r2s,cyc,total"
    assert rep.csv_row() == "3,0.5,0.25,0.125,1.875"


# ---------------------------------------------------------------------------
# translate

def test_translate_zero_net_is_half():
    gen = GeneratorNet(3, 2, 1)
    gen.params["out.weight"].data[...] = 0.0
    gen.params["out.bias"].data[...] = 0.0
    img = BevImage(np.random.default_rng(0).random((3, 16, 16)))
    out = translate(gen, img)
    assert isinstance(out, BevImage) and out.grid == img.grid
    np.testing.assert_array_equal(out.channels, 0.5)


def test_translate_shape_range_and_channel_check():
    gen = GeneratorNet(3, 2, 1, np.random.default_rng(1))
    x = np.random.default_rng(2).random((3, 16, 16))
    y = translate(gen, x)
    assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1
    with pytest.raises(ValueError):
        translate(gen, np.zeros((1, 16, 16)))
