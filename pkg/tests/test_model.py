import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critforge import autodiff as ad
from critforge.data import DatasetFormatError, normalize_batch, normalize_fit, normalize_target
from critforge.model import (
    ModelConfig,
    branch_shapes,
    build_model,
    concat_length,
    forward,
    forward_batch,
    load_model,
    param_shapes,
    predict,
    save_model,
)
from critforge.data import normalize_apply
from critforge.train import TrainConfig, train_epoch

from oracles import param_count


def _count(config):
    return sum(math.prod(s) for s in param_shapes(config).values())


def test_default_shapes():
    cfg = ModelConfig()
    assert branch_shapes((4, 25, 30, 30), cfg.conv3d, "same") == [
        (4, 25, 30, 30), (8, 13, 15, 15), (16, 7, 8, 8)]
    assert branch_shapes((1, 30, 30), cfg.conv2d, "same") == [(1, 30, 30), (8, 15, 15), (16, 8, 8)]
    assert concat_length(cfg) == 7168 + 1024 + 5


@pytest.mark.parametrize("conv3d,conv2d,width,layers", [
    ([(3, 8, 2), (3, 16, 2)], [(3, 8, 2), (3, 16, 2)], 1024, 2),
    ([(5, 2, 3)], [(3, 4, 1), (3, 2, 2)], 16, 1),
])
def test_param_count_matches_closed_form(conv3d, conv2d, width, layers):
    cfg = ModelConfig(conv3d=conv3d, conv2d=conv2d, head_width=width, head_layers=layers)
    assert _count(cfg) == param_count(conv3d, conv2d, head=(width,) * layers)


def test_build_error_on_vanishing_extent():
    cfg = ModelConfig(conv2d=[(5, 2, 1)] * 8, padding="valid")
    with pytest.raises(ValueError, match="maps extent"):
        build_model(cfg)


def test_build_is_deterministic(tiny_config):
    a, b, c = (build_model(tiny_config, s) for s in (4, 4, 5))
    for name, t in a.params.items():
        np.testing.assert_array_equal(t.data, b.params[name].data)
    assert any(not np.array_equal(t.data, c.params[n].data) for n, t in a.params.items())


def test_init_bounds_and_zero_bias(tiny_config):
    m = build_model(tiny_config, 0)
    for name, t in m.params.items():
        if name.endswith(".b"):
            assert np.all(t.data == 0)
        else:
            fan_in = math.prod(t.shape[1:])
            assert np.abs(t.data).max() <= math.sqrt(6 / fan_in)


def test_zero_network_predicts_offset(tiny_config, small_campaign):
    m = build_model(tiny_config, 0)
    for _, t in m.params.items():
        t.data[...] = 0.0
    m.norm = normalize_fit(small_campaign)
    k = predict(m, small_campaign.f3d[:3], small_campaign.f2d[:3], small_campaign.f0d[:3])
    np.testing.assert_array_equal(k, 1.0)


def test_forward_matches_predict(tiny_config, small_campaign):
    m = build_model(tiny_config, 1)
    m.norm = normalize_fit(small_campaign)
    rec = small_campaign[4]
    single = forward(m, normalize_apply(m.norm, rec))
    batch = predict(m, small_campaign.f3d[4:5], small_campaign.f2d[4:5], small_campaign.f0d[4:5])
    assert single == pytest.approx(batch[0], abs=1e-12)
    with pytest.raises(ValueError):
        forward(m, rec, mode="eval")


def test_infer_mode_ignores_dropout(tiny_config, small_campaign):
    m = build_model(tiny_config, 1)
    m.norm = normalize_fit(small_campaign)
    x = normalize_batch(m.norm, small_campaign.f3d[:4], small_campaign.f2d[:4], small_campaign.f0d[:4])
    a = forward_batch(m, *x).data
    b = forward_batch(m, *x).data
    np.testing.assert_array_equal(a, b)
    c = forward_batch(m, *x, train=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(a, c)


def test_forward_rejects_bad_shapes(tiny_config):
    m = build_model(tiny_config, 0)
    with pytest.raises(ValueError, match="3D"):
        forward_batch(m, np.zeros((1, 3, 25, 30, 30), np.float32), np.zeros((1, 1, 30, 30), np.float32),
                      np.zeros((1, 5), np.float32))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
def test_forward_finite_on_random_inputs(seed, amp):
    m = build_model(ModelConfig(conv3d=[(3, 2, 4)], conv2d=[(3, 2, 4)], head_width=8), 0)
    r = np.random.default_rng(seed)
    out = forward_batch(
        m,
        (amp * r.standard_normal((2, 4, 25, 30, 30))).astype(np.float32),
        (amp * r.standard_normal((2, 1, 30, 30))).astype(np.float32),
        (amp * r.standard_normal((2, 5))).astype(np.float32),
    )
    assert np.all(np.isfinite(out.data))


def test_one_small_step_reduces_loss(tiny_config, small_campaign):
    m = build_model(tiny_config, 2, dtype=np.float64)
    m.norm = normalize_fit(small_campaign)
    x = normalize_batch(m.norm, small_campaign.f3d[:1], small_campaign.f2d[:1],
                        small_campaign.f0d[:1], np.float64)
    y = np.atleast_1d(normalize_target(m.norm, small_campaign.k_target[:1]))

    def loss():
        return ad.mse_loss(forward_batch(m, *x), y)

    before = loss()
    before.backward()
    ad.adam_step(m.params, lr=1e-5)
    assert loss().item() < before.item()


def test_gradcheck_small_model(tiny_config, small_campaign):
    m = build_model(tiny_config, 3, dtype=np.float64)
    m.norm = normalize_fit(small_campaign)
    x = normalize_batch(m.norm, small_campaign.f3d[:2], small_campaign.f2d[:2],
                        small_campaign.f0d[:2], np.float64)
    y = normalize_target(m.norm, small_campaign.k_target[:2])

    def f():
        return ad.mse_loss(forward_batch(m, *x, train=True, rng=np.random.default_rng(1)), y)

    rep = ad.finite_diff_check(f, m.params, probe_count=20)
    assert rep.passed, rep.max_rel_error


def test_checkpoint_round_trip(tiny_config, small_campaign, tmp_path):
    m = build_model(tiny_config, 6)
    m.norm = normalize_fit(small_campaign)
    m.meta["note"] = "x"
    save_model(m, tmp_path / "m")
    back = load_model(tmp_path / "m")
    args = (small_campaign.f3d[:5], small_campaign.f2d[:5], small_campaign.f0d[:5])
    np.testing.assert_array_equal(predict(back, *args), predict(m, *args))
    assert back.config == m.config and back.meta == m.meta
    assert back.norm.target_scale == m.norm.target_scale


def test_checkpoint_tampering_detected(tiny_config, small_campaign, tmp_path):
    m = build_model(tiny_config, 6)
    save_model(m, tmp_path)
    blob = tmp_path / "fc_0.w.value.f32"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(DatasetFormatError, match="bytes"):
        load_model(tmp_path)


def test_checkpoint_concat_order_checked(tiny_config, tmp_path):
    save_model(build_model(tiny_config, 6), tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["concat_order"] = "2d,3d,0d"
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DatasetFormatError, match="concat order"):
        load_model(tmp_path)


def test_resume_matches_uninterrupted(tiny_config, small_campaign, tmp_path):
    cfg = TrainConfig(batch_size=16, seed=9)
    idx = np.arange(0, len(small_campaign), 2)

    def fresh():
        m = build_model(tiny_config, 9)
        m.norm = normalize_fit(small_campaign, idx)
        return m

    straight = fresh()
    for _ in range(4):
        train_epoch(straight, small_campaign, idx, cfg)

    part = fresh()
    for _ in range(2):
        train_epoch(part, small_campaign, idx, cfg)
    save_model(part, tmp_path)
    resumed = load_model(tmp_path)
    for _ in range(2):
        train_epoch(resumed, small_campaign, idx, cfg)

    assert resumed.epoch == straight.epoch == 4
    assert resumed.params.step == straight.params.step
    for name, t in straight.params.items():
        np.testing.assert_array_equal(t.data, resumed.params[name].data)
