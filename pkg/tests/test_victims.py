import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from makeup_attack.evalkit.synth import SyntheticFaceSpec, synth_dataset
from makeup_attack.victims import (
    REFERENCE_TAUS,
    Registry,
    ToyEmbedder,
    VictimArch,
    VictimError,
    VictimModel,
    VictimTrainingError,
    calibrate_threshold,
    cosine,
    embed,
    train_toy_victims,
)

from conftest import autograd_grad, central_diff, rel_err

TINY = VictimArch("tiny", widths=(4, 8), embed_dim=8, input_size=(16, 16))


def tiny_model(seed=0, dtype=torch.float32, **kw):
    torch.manual_seed(seed)
    return VictimModel("tiny", ToyEmbedder(TINY).to(dtype), TINY.input_size, arch=TINY, **kw)


# --- cosine ----------------------------------------------------------------


def test_cosine_examples():
    t = lambda *v: torch.tensor(v, dtype=torch.float64)
    assert cosine(t(1, 0), t(0, 1)).item() == 0
    assert cosine(t(1, 1), t(2, 2)).item() == pytest.approx(1.0, abs=1e-15)
    assert cosine(t(1, 0), t(-3, 0)).item() == -1
    assert cosine(t(3, 4), t(4, 3)).item() == pytest.approx(24 / 25, abs=1e-15)
    with pytest.raises(VictimError):
        cosine(t(0, 0), t(1, 0))


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.floats(0.1, 50))
def test_cosine_bounded_symmetric_scale_free(u, v, k):
    u, v = torch.tensor(u, dtype=torch.float64), torch.tensor(v, dtype=torch.float64)
    if u.norm() < 1e-3 or v.norm() < 1e-3:
        return
    c = cosine(u, v)
    assert -1 - 1e-12 <= c <= 1 + 1e-12
    assert c == cosine(v, u)
    assert torch.isclose(cosine(k * u, v), c, rtol=0, atol=1e-12)


# --- embedding ---------------------------------------------------------------


def test_embed_shapes_and_batch_consistency():
    m = tiny_model()
    x = torch.rand(3, 3, 20, 24)
    e = embed(x, m)
    assert e.shape == (3, 8)
    assert torch.allclose(embed(x[1], m), e[1], atol=1e-6)
    with pytest.raises(VictimError):
        embed(torch.full((3, 16, 16), float("nan")), m)


def test_self_similarity_is_one():
    m = tiny_model()
    x = torch.rand(4, 3, 16, 16)
    e = embed(x, m)
    assert torch.allclose(cosine(e, e), torch.ones(4), atol=1e-6)


def test_embed_gradient_matches_central_differences():
    m = tiny_model(dtype=torch.float64)
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    w = torch.randn(8, dtype=torch.float64)
    f = lambda z: embed(z, m) @ w
    assert rel_err(autograd_grad(f, x), central_diff(f, x)) < 1e-4


def test_victims_are_frozen_in_eval_mode():
    m = tiny_model()
    assert not m.net.training
    assert all(not p.requires_grad for p in m.net.parameters())


def test_tau_must_be_a_cosine():
    with pytest.raises(VictimError):
        tiny_model(tau=1.5)


# --- thresholds --------------------------------------------------------------


def brute_force_tau(scores, far):
    cands = sorted(set(scores))
    for t in cands:
        if sum(s > t for s in scores) / len(scores) <= far:
            return t
    raise AssertionError("unreachable: max score always qualifies")


def test_calibration_examples():
    scores = [round(0.1 * k, 1) for k in range(1, 11)]
    assert calibrate_threshold(scores, 0.1) == 0.9
    assert calibrate_threshold(scores, 0.01) == 1.0
    assert calibrate_threshold(scores, 0.5) == 0.5
    assert calibrate_threshold([0.3] * 50, 0.01) == 0.3


@pytest.mark.parametrize("scores,far", [([], 0.01), ([0.1], 0.0), ([0.1], 1.0)])
def test_calibration_rejects_bad_input(scores, far):
    with pytest.raises(VictimError):
        calibrate_threshold(scores, far)


scores_st = st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=60)


@given(scores_st, st.floats(0.001, 0.999))
def test_calibration_matches_brute_force(scores, far):
    tau = calibrate_threshold(scores, far)
    assert tau == brute_force_tau(scores, far)
    assert np.mean(np.asarray(scores) > tau) <= far


@given(scores_st, st.floats(0.001, 0.998), st.floats(0.0, 0.5))
def test_calibration_is_monotone_in_far(scores, far, bump):
    hi = min(far + bump, 0.999)
    assert calibrate_threshold(scores, hi) <= calibrate_threshold(scores, far)


# --- registry ---------------------------------------------------------------


def test_registry_lookup_and_reference_taus():
    a = tiny_model()
    b = VictimModel("FaceNet", a.net, (16, 16))
    reg = Registry([a, b])
    assert reg.names == ["tiny", "FaceNet"] and len(reg) == 2
    assert reg["FaceNet"].reference_tau == REFERENCE_TAUS["FaceNet"] == 0.409
    assert reg["tiny"].reference_tau is None
    assert "tiny" in reg and "nope" not in reg
    with pytest.raises(VictimError, match="nope"):
        reg["nope"]


def test_reference_thresholds():
    assert REFERENCE_TAUS == {"IR152": 0.167, "IRSE50": 0.241, "MobileFace": 0.302, "FaceNet": 0.409}


# --- toy training --------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_faces():
    ds = synth_dataset(SyntheticFaceSpec(n_identities=4, images_per_identity=5), seed=3)
    return ds.images, ds.labels


def test_training_is_deterministic_and_separates(tiny_faces):
    x, y = tiny_faces
    kw = dict(architectures=[TINY], seed=5, min_separation=0.2, min_epochs=2, max_epochs=40, batch_size=8)
    a = train_toy_victims(x, y, **kw)[0]
    b = train_toy_victims(x, y, **kw)[0]
    assert a.meta["separation"] >= 0.2
    for p, q in zip(a.net.state_dict().values(), b.net.state_dict().values()):
        assert torch.equal(p, q)
    assert not a.trainable and all(not p.requires_grad for p in a.net.parameters())


def test_training_failure_carries_report(tiny_faces):
    x, y = tiny_faces
    with pytest.raises(VictimTrainingError) as err:
        train_toy_victims(x, y, [TINY], min_separation=2.5, min_epochs=1, max_epochs=2)
    assert err.value.report["tiny"]["epochs"] == 2
    assert math.isfinite(err.value.report["tiny"]["separation"])


def test_training_needs_two_identities():
    with pytest.raises(VictimError):
        train_toy_victims(torch.rand(4, 3, 16, 16), [0, 0, 0, 0], [TINY])
    with pytest.raises(VictimError):
        train_toy_victims(torch.rand(2, 3, 16, 16), [0, 1], [TINY])
