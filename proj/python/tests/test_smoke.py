import json

import numpy as np
import pytest

import canonxai as cx


@pytest.fixture(scope="module")
def corner():
    return cx.fixture("corner_detector")


def test_fixture_catalogue():
    assert cx.fixture_names() == [
        "vgg_like", "resnet_like", "densenet_like", "rn_like", "corner_detector", "fanout_bn",
    ]
    model, samples = cx.fixture("vgg_like", seed=3)
    assert samples == []
    assert model.count("BatchNorm") > 0


def test_canonize_keeps_the_function():
    model, _ = cx.fixture("resnet_like")
    canon, report = model.canonize()
    assert canon.count("BatchNorm") == 0
    assert json.loads(report)["fusions"]
    x = np.random.default_rng(0).uniform(size=model.input_shape).astype(np.float32)
    a, b = model.forward(x), canon.forward(x)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-5 * (1 + np.abs(a).max()))


def test_save_and_load(tmp_path):
    model, _ = cx.fixture("densenet_like")
    model.save(str(tmp_path / "m.json"))
    assert (tmp_path / "m.bin").exists()
    assert cx.Model.load(str(tmp_path / "m.json")) == model


def test_attribution_and_metrics(corner):
    model, samples = corner
    s = samples[0]
    assert s["image"].shape == (1, 16, 16) and s["mask"].shape == (16, 16)
    r = cx.attribute(model, s["image"], s["label"], "epsilon")
    assert r.shape == s["image"].shape
    # epsilon-LRP with a tiny epsilon nearly conserves the logit on a bias-free model
    bf, _ = cx.fixture("corner_detector", bias_free=True)
    logit = bf.forward(s["image"])[s["label"]]
    assert abs(cx.attribute(bf, s["image"], s["label"], "epsilon").sum() - logit) <= 1e-3 * abs(logit)

    g0 = cx.attribute(model, s["image"], s["label"], gamma={}, gamma_default=0.0)
    np.testing.assert_allclose(g0, r, atol=1e-6)

    h = cx.normalize(cx.pool(r, "sum"))
    assert h.shape == (16, 16) and np.sqrt(np.mean(h.astype(np.float64) ** 2)) == pytest.approx(1.0, rel=1e-5)
    assert 0.0 <= cx.rra(h, s["mask"]) <= 1.0
    assert 0.0 <= cx.rma(h, s["mask"]) <= 1.0
    assert cx.gini(np.array([0, 1, 0, 0], np.float32)) == pytest.approx(0.75)
    assert cx.ssim(h, h) == pytest.approx(1.0)
    assert cx.saliency(model, s["image"], s["label"]).shape == s["image"].shape


def test_evaluate_is_deterministic(corner):
    model, samples = corner
    kw = dict(composites=["eps-plus", "saliency"], metrics=["rra", "gini", "random_logit"], seed=3)
    a = cx.evaluate(model, samples[:4], threads=1, **kw)
    b = cx.evaluate(model, samples[:4], threads=3, **kw)
    assert a.to_csv() == b.to_csv()
    assert len(a.rows) == 4 * 2 * 2 * 3 and a.error_count == 0
    assert json.loads(a.to_json())


def test_grid_search(corner):
    model, samples = corner
    assert cx.count_configurations(["g1", "g2", "g3", "g4"], [0, 0.1, 0.25, 0.5, 1, 10]) == 2592
    rep = cx.grid_search(model, samples[:2], ["low", "mid"], [0.0, 1.0], metrics=["rra"])
    assert len(rep.rows) == 2 * 4 * 2
    assert len(rep.marginals) == 2 * 2 * 2
    with pytest.raises(cx.Error):
        cx.grid_search(model, samples[:2], ["nope"], [0.0])


def test_errors_are_value_errors(corner):
    model, samples = corner
    with pytest.raises(ValueError):
        cx.attribute(model, samples[0]["image"], 0, "deeplift")
    with pytest.raises(cx.Error):
        cx.attribute(model, np.zeros((2, 16, 16), np.float32), 0)
