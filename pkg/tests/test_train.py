import csv
import math

import numpy as np
import pytest

from floodsense import train as TR
from floodsense.data import ChipSample
from floodsense.ffss import FloodDamageModel
from floodsense.geo import GridSpec, rectangle
from floodsense.losses import LossConfig
from floodsense.tensor import Tensor
from helpers import random_bundle, random_labels, tiny_model_config


def chip(seed, size=32, dtype=np.float64, vhr=True):
    rng = np.random.default_rng(seed)
    b = random_bundle(rng, size, vhr)
    cast = lambda a: np.asarray(a, dtype=dtype)  # noqa: E731
    return ChipSample(seed, cast(b.pre_sar), cast(b.post_sar), cast(b.risk), cast(b.vhr),
                      random_labels(rng, size), GridSpec(size, size, 0.0, size * 5.0, 5.0))


def grads(model):
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in model.parameters()]


def test_adamw_matches_reference_on_quadratic():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.5, 3.0, 10)
    target = rng.standard_normal(10)
    p = Tensor(rng.standard_normal(10), requires_grad=True)
    opt = TR.AdamW([p], lr=1e-2, weight_decay=5e-3)
    ref = [float(v) for v in p.data]
    m = [0.0] * 10
    v = [0.0] * 10
    b1, b2, lr, wd, eps = 0.9, 0.999, 1e-2, 5e-3, 1e-8
    for t in range(1, 101):
        p.grad = None
        (0.5 * (Tensor(a) * (p - Tensor(target)) * (p - Tensor(target))).sum()).backward()
        opt.step()
        for i in range(10):
            g = a[i] * (ref[i] - target[i])
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mh, vh = m[i] / (1 - b1 ** t), v[i] / (1 - b2 ** t)
            ref[i] = ref[i] - lr * wd * ref[i]
            ref[i] = ref[i] - lr * mh / (math.sqrt(vh) + eps)
    assert np.abs(p.data - np.array(ref)).max() <= 1e-12


def test_adamw_with_zero_gradient_only_decays():
    p = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    opt = TR.AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 * 0.95, -1.0 * 0.95], atol=1e-15)


def test_accumulation_matches_single_batch():
    model = FloodDamageModel(tiny_model_config(), wiring=4, seed=1)
    samples = [chip(i) for i in range(4)]
    cfg = LossConfig()
    model.zero_grad()
    TR.accumulate_gradients(model, [samples], cfg)
    full = grads(model)
    model.zero_grad()
    TR.accumulate_gradients(model, [samples[:2], samples[2:]], cfg)
    split = grads(model)
    assert max(np.abs(a - b).max() for a, b in zip(full, split)) <= 1e-10


def test_missing_fm_gives_no_fm_gradient():
    model = FloodDamageModel(tiny_model_config(), wiring=4, seed=2)
    s = chip(3)
    s.labels["fm"][:] = 255
    model.zero_grad()
    TR.accumulate_gradients(model, [[s]], LossConfig())
    fm = [p.grad for _, p in model.named_parameters() if _.startswith("decoders.fm")]
    assert fm and all(g is None or not g.any() for g in fm)


def test_steps_reduce_loss_on_fixed_sample():
    model = FloodDamageModel(tiny_model_config(), wiring=4, seed=3)
    s = chip(4)
    cfg = LossConfig()
    opt = TR.AdamW(model.parameters(), lr=5e-3)
    before = TR.mean_loss(model, [s], cfg)
    for _ in range(8):
        TR.train_step(model, opt, [[s]], cfg)
    assert TR.mean_loss(model, [s], cfg) < before


def test_non_finite_loss_aborts():
    model = FloodDamageModel(tiny_model_config(), wiring=4, seed=0)
    s = chip(5)
    s.pre_sar[0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        TR.accumulate_gradients(model, [[s]], LossConfig())


def test_train_writes_trace(tmp_path):
    model = FloodDamageModel(tiny_model_config(), wiring=2, seed=0)
    cfg = TR.TrainConfig(lr=1e-3, epochs=3, batch_size=1, accumulation_steps=2, max_steps=3,
                         model=tiny_model_config())
    seen = []
    trace = TR.train(model, [chip(i) for i in range(3)], cfg, tmp_path / "t.csv", on_step=lambda s, v: seen.append(s))
    assert len(trace) == 3 and seen == [0, 1, 2]
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["epoch", "step", "loss"] and [float(r[2]) for r in rows[1:]] == trace


def test_evaluate_is_deterministic_and_survives_checkpoint(tmp_path):
    mc = tiny_model_config("float32")
    model = FloodDamageModel(mc, wiring=4, seed=7)
    samples = [chip(i, dtype=np.float32) for i in range(2)]
    fps = [rectangle(1, 20, 100, 60, 140), rectangle(2, 0, 0, 30, 30)]
    gt = {1: 2, 2: 0}
    r1 = TR.evaluate(model, samples, fps, gt, loss_cfg=LossConfig())
    assert r1 == TR.evaluate(model, samples, fps, gt, loss_cfg=LossConfig())
    assert set(r1["pixel"]) == {"bda", "fm", "loc"} and "building" in r1
    TR.save_checkpoint(model, tmp_path / "m.fds")
    other = FloodDamageModel(mc, wiring=4, seed=99)
    TR.load_checkpoint(other, tmp_path / "m.fds")
    assert TR.evaluate(other, samples, fps, gt, loss_cfg=LossConfig()) == r1


def test_predict_shapes_and_range():
    model = FloodDamageModel(tiny_model_config(), wiring=4, seed=0)
    out = TR.predict(model, chip(0))
    assert {k: v.shape for k, v in out.items()} == {"bda": (32, 32), "fm": (32, 32), "loc": (32, 32)}
    assert out["bda"].dtype == np.uint8 and out["fm"].max() <= 2


def test_config_round_trip_and_validation():
    cfg = TR.TrainConfig(lr=3e-4, model=tiny_model_config())
    back = TR.TrainConfig.from_json(cfg.to_json())
    assert back.to_json() == cfg.to_json() and back.effective_batch == 16
    with pytest.raises(ValueError):
        TR.TrainConfig.from_json({"learning_rate": 1.0})
    with pytest.raises(ValueError):
        TR.TrainConfig(wiring=7)
    with pytest.raises(ValueError):
        TR.TrainConfig(lr=0)


def test_defaults():
    cfg = TR.TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.epochs, cfg.batch_size, cfg.accumulation_steps) == (1e-4, 5e-3, 30, 2, 8)


def test_class_weights_from_buildings_and_pixels():
    s = chip(0)
    w = TR.dataset_class_weights([s], building_classes=[0, 0, 1, 2, 3, 3])
    np.testing.assert_allclose(w["bda"], [3.0, 6.0, 6.0, 3.0])
    counts = np.bincount(s.labels["fm"].ravel(), minlength=3)
    np.testing.assert_allclose(w["fm"], counts.sum() / counts)
