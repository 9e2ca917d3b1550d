import math
from dataclasses import dataclass

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_equal
from pydantic import ValidationError

from makeup_attack.blending import random_pyramid
from makeup_attack.gan import DiscriminatorArch, GeneratorArch, PatchDiscriminator, UNetGenerator
from makeup_attack.geometry import BBox
from makeup_attack.io import load_checkpoint, save_checkpoint
from makeup_attack.meta_attack import (
    AttackConfig,
    AttackError,
    MetaSplit,
    NonFiniteError,
    PatchData,
    attack_loss,
    ensemble_train,
    meta_gradients,
    meta_optimize_step,
    sample_split,
    train,
)
from makeup_attack.victims import ToyEmbedder, VictimArch, VictimModel

# --- scalar objective ------------------------------------------------------------
#
# Victim i has loss a_i/2 (w - c_i)^2 on the "composite" w; the four aux terms
# are fixed quadratics. Everything has closed-form first and second derivatives.


@dataclass(frozen=True)
class Quad:
    name: str
    a: float
    c: float

    def d1(self, w):
        return self.a * (w - self.c)


AUX = {"gen": (0.5, 1.0), "grad": (1.5, -2.0), "cont": (0.25, 3.0), "style": (2.0, 0.5)}


class ScalarObjective:
    def composite(self, params):
        return params["w"]

    def model_loss(self, model, comp):
        return 0.5 * model.a * (comp - model.c) ** 2

    def aux_losses(self, params, comp):
        return {t: 0.5 * a * (comp - c) ** 2 for t, (a, c) in AUX.items()}


def aux_grad(w, weights):
    return sum(weights[t] * a * (w - c) for t, (a, c) in AUX.items())


def p(w):
    return {"w": torch.tensor(float(w), dtype=torch.float64)}


def meta_oracle(w, train_models, test, alpha1, second_order=False):
    total = 0.0
    for m in train_models:
        prime = w - alpha1 * m.d1(w)
        chain = (1 - alpha1 * m.a) if second_order else 1.0
        total += m.d1(w) + test.d1(prime) * chain
    return total


quads = st.builds(Quad, st.just("q"), st.floats(0.1, 3), st.floats(-3, 3))
ws = st.floats(-4, 4)
alphas = st.floats(0, 1.5)


def named(models):
    return [Quad(f"m{i}", m.a, m.c) for i, m in enumerate(models)]


@given(st.lists(quads, min_size=2, max_size=4), ws, alphas, st.booleans())
def test_meta_gradient_matches_closed_form(models, w, alpha1, second):
    models = named(models)
    split = MetaSplit(models[1:], models[0])
    cfg = AttackConfig(alpha1=alpha1, second_order=second)
    mg = meta_gradients(p(w), split, ScalarObjective(), cfg, aux_components=True)
    expect = meta_oracle(w, models[1:], models[0], alpha1, second)
    assert mg.attack["w"].item() == pytest.approx(expect, abs=1e-8)
    for t, (a, c) in AUX.items():
        assert mg.aux[t]["w"].item() == pytest.approx(a * (w - c), abs=1e-12)
    combined = mg.combined(alpha1)["w"].item()
    assert combined == pytest.approx(alpha1 * expect + aux_grad(w, cfg.weights), abs=1e-8)


@given(st.lists(quads, min_size=2, max_size=4), ws)
def test_zero_inner_step_collapses_to_plain_sum(models, w):
    models = named(models)
    split = MetaSplit(models[1:], models[0])
    mg = meta_gradients(p(w), split, ScalarObjective(), AttackConfig(alpha1=0.0))
    plain = sum(m.d1(w) for m in models[1:]) + len(models[1:]) * models[0].d1(w)
    assert mg.attack["w"].item() == pytest.approx(plain, abs=1e-10)
    # with alpha1 = 0 the attack term carries no weight in the update
    assert mg.combined(0.0)["w"].item() == pytest.approx(aux_grad(w, AttackConfig().weights), abs=1e-10)


def test_second_order_scalar_oracle_exact():
    a, b, c = Quad("a", 2.0, 1.0), Quad("b", 0.5, -1.0), Quad("c", 1.0, 0.0)
    w, alpha1 = 0.7, 0.3
    cfg = AttackConfig(alpha1=alpha1, second_order=True)
    mg = meta_gradients(p(w), MetaSplit([a, b], c), ScalarObjective(), cfg)
    # d/dw [L_a(w) + L_c(w - alpha1 L_a'(w))] + same for b, written out
    by_hand = 0.0
    for m in (a, b):
        by_hand += m.a * (w - m.c) + c.a * (w - alpha1 * m.a * (w - m.c) - c.c) * (1 - alpha1 * m.a)
    assert abs(mg.attack["w"].item() - by_hand) < 1e-8


@given(st.lists(quads, min_size=2, max_size=4), ws, alphas)
def test_meta_minus_ensemble_is_the_meta_test_gradient(models, w, alpha1):
    models = named(models)
    split = MetaSplit(models[1:], models[0])
    cfg = AttackConfig(alpha1=alpha1)
    meta = meta_gradients(p(w), split, ScalarObjective(), cfg, mode="meta")
    ens = meta_gradients(p(w), split, ScalarObjective(), cfg, mode="ensemble")
    test_part = sum(models[0].d1(w - alpha1 * m.d1(w)) for m in models[1:])
    assert meta.attack["w"].item() - ens.attack["w"].item() == pytest.approx(test_part, abs=1e-9)
    assert ens.test_losses == []


def test_zero_weights_leave_parameters_unchanged():
    gen = torch.nn.Linear(1, 1, bias=False).double()

    class LinObjective(ScalarObjective):
        def composite(self, params):
            return params["weight"].sum()

    cfg = AttackConfig(alpha1=0.0, alpha2=0.0, beta1=0.0, beta2=0.0, beta3=0.0, lr=0.5)
    opt = torch.optim.SGD(gen.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    before = gen.weight.detach().clone()
    models = [Quad("x", 1.0, 2.0), Quad("y", 2.0, -1.0)]
    for _ in range(3):
        meta_optimize_step(gen, opt, MetaSplit(models[:1], models[1]), LinObjective(), cfg)
    assert torch.equal(gen.weight, before)


def test_optimize_step_moves_against_the_combined_gradient():
    gen = torch.nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        gen.weight.fill_(0.5)

    class LinObjective(ScalarObjective):
        def composite(self, params):
            return params["weight"].sum()

    cfg = AttackConfig(lr=0.1, momentum=0.0)
    opt = torch.optim.SGD(gen.parameters(), lr=cfg.lr)
    models = [Quad("x", 1.0, 2.0), Quad("y", 2.0, -1.0)]
    mg = meta_optimize_step(gen, opt, MetaSplit(models[:1], models[1]), LinObjective(), cfg)
    expect = 0.5 - 0.1 * (meta_oracle(0.5, models[:1], models[1], 1.0) + aux_grad(0.5, cfg.weights))
    assert gen.weight.item() == pytest.approx(expect, abs=1e-12)
    assert mg.train_losses == [pytest.approx(0.5 * 1.0 * (0.5 - 2.0) ** 2)]


def test_nonfinite_gradient_raises():
    gen = torch.nn.Linear(1, 1, bias=False).double()

    class Bad(ScalarObjective):
        def composite(self, params):
            return params["weight"].sum() * float("nan")

    opt = torch.optim.SGD(gen.parameters(), lr=0.1)
    with pytest.raises(NonFiniteError):
        meta_optimize_step(gen, opt, MetaSplit([Quad("x", 1, 0)], Quad("y", 1, 1)), Bad(), AttackConfig())


# --- splits -------------------------------------------------------------------


def test_split_sampling():
    vs = [Quad(f"v{i}", 1, 0) for i in range(3)]
    rng = np.random.default_rng(0)
    seen = set()
    for it in range(60):
        s = sample_split(vs, rng, it)
        assert len(s.train_models) == 2 and s.test_model not in s.train_models
        seen.add(s.test_model.name)
    assert seen == {"v0", "v1", "v2"}
    assert [sample_split(vs, None, it, "round_robin").test_model.name for it in range(4)] == ["v0", "v1", "v2", "v0"]
    with pytest.raises(AttackError):
        sample_split(vs[:1], rng)
    with pytest.raises(AttackError):
        MetaSplit([vs[0]], vs[0])


def test_attack_config_defaults_and_validation():
    cfg = AttackConfig()
    assert (cfg.alpha1, cfg.alpha2, cfg.beta1, cfg.beta2, cfg.beta3) == (1.0, 1.0, 0.1, 0.1, 0.1)
    assert (cfg.iterations, cfg.batch_size, cfg.lr, cfg.momentum) == (2000, 8, 0.001, 0.9)
    assert cfg.second_order is False
    with pytest.raises(ValidationError):
        AttackConfig(beta1=-1)
    with pytest.raises(ValidationError):
        AttackConfig(momentum=1.0)


def test_attack_loss_range():
    torch.manual_seed(0)
    arch = VictimArch("v", widths=(4,), embed_dim=4, input_size=(8, 8))
    m = VictimModel("v", ToyEmbedder(arch), (8, 8))
    x = torch.rand(5, 3, 8, 8)
    assert torch.allclose(attack_loss(m, x, x, reduction="none"), torch.zeros(5), atol=1e-6)
    l = attack_loss(m, x, torch.rand(5, 3, 8, 8), reduction="none")
    assert bool(((l >= 0) & (l <= 2)).all())


# --- the face training loop ------------------------------------------------------

SIZE, BOX = (16, 16), BBox(4, 2, 8, 12)


def _victims():
    out = []
    for k in range(3):
        torch.manual_seed(10 + k)
        arch = VictimArch(f"v{k}", widths=(4, 8), embed_dim=6, input_size=SIZE)
        out.append(VictimModel(arch.name, ToyEmbedder(arch), SIZE, arch=arch))
    return out


def _data(seed, n):
    g = torch.Generator().manual_seed(seed)
    m = (torch.rand(n, *BOX.shape, generator=g) > 0.3).float()
    return PatchData(torch.rand(n, 3, *SIZE, generator=g), m, BOX)


@pytest.fixture(scope="module")
def loop_inputs():
    return _data(0, 6), _data(1, 4), _data(2, 3), _victims()


def _nets(seed=0):
    torch.manual_seed(seed)
    return UNetGenerator(GeneratorArch(BOX.shape, 4, 2)), PatchDiscriminator(DiscriminatorArch(BOX.shape, 4, 2))


def _run(inputs, cfg, fn=train, nets=None, **kw):
    src, mk, tg, vic = inputs
    g, d = nets or _nets()
    return fn(src, mk, tg, vic, cfg, g, d, random_pyramid(0), **kw)


CFG = dict(batch_size=2, lr=0.01, style_normalization="gatys")


def test_single_iteration_history(loop_inputs):
    res = _run(loop_inputs, AttackConfig(iterations=1, **CFG))
    assert len(res.history) == 1 and res.iteration == 1
    row = res.history[0]
    assert set(row) == {"iteration", "test_model", "dis", "gen", "grad", "cont", "style", "attack_train", "attack_test"}
    assert all(math.isfinite(row[k]) for k in row if k != "test_model")


@pytest.mark.parametrize("fn", [train, ensemble_train])
def test_training_is_deterministic(loop_inputs, fn):
    cfg = AttackConfig(iterations=3, seed=4, **CFG)
    a, b = _run(loop_inputs, cfg, fn), _run(loop_inputs, cfg, fn)
    assert_equal(a.history, b.history)      # NaN-aware: ensemble rows carry no meta-test loss
    for x, y in zip(a.generator.state_dict().values(), b.generator.state_dict().values()):
        assert torch.equal(x, y)


def test_ensemble_history_has_no_meta_test_loss(loop_inputs):
    res = _run(loop_inputs, AttackConfig(iterations=2, **CFG), ensemble_train)
    assert all(math.isnan(r["attack_test"]) for r in res.history)


def test_nan_checkpoints_then_aborts(loop_inputs):
    g, d = _nets()
    with torch.no_grad():
        g.head.bias.fill_(float("nan"))
    saved = []
    with pytest.raises(NonFiniteError):
        _run(loop_inputs, AttackConfig(iterations=5, **CFG), nets=(g, d), checkpoint_fn=saved.append)
    assert len(saved) == 1 and saved[0].iteration == 0


def test_resume_matches_uninterrupted_run(loop_inputs, tmp_path):
    straight = _run(loop_inputs, AttackConfig(iterations=4, seed=2, **CFG))

    def keep(res):
        save_checkpoint(tmp_path / f"it{res.iteration}.pt", res)

    _run(loop_inputs, AttackConfig(iterations=2, seed=2, checkpoint_every=2, **CFG), checkpoint_fn=keep)
    ck = load_checkpoint(tmp_path / "it2.pt")
    resumed = _run(loop_inputs, AttackConfig(iterations=4, seed=2, **CFG),
                   nets=(ck["generator_module"], ck["discriminator_module"]), resume=ck)
    assert resumed.history == straight.history
    for x, y in zip(resumed.generator.state_dict().values(), straight.generator.state_dict().values()):
        assert torch.equal(x, y)


def test_loop_input_errors(loop_inputs):
    src, mk, tg, vic = loop_inputs
    g, d = _nets()
    with pytest.raises(AttackError):
        train(src, mk, tg, vic[:1], AttackConfig(iterations=1), g, d, random_pyramid(0))
    empty = PatchData(src.images[:0], src.masks[:0], BOX)
    with pytest.raises(AttackError):
        train(src, empty, tg, vic, AttackConfig(iterations=1), g, d, random_pyramid(0))
