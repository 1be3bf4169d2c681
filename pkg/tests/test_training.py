import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftz.data import generate_dataset
from ftz.errors import ConfigError, TrainingError
from ftz.mllm import build_model
from ftz.params import ParameterStore, load_checkpoint
from ftz.tensor import Tensor
from ftz.training import (AdamW, BatchSampler, StageConfig, clip_grad_norm, lr_at, partition_parameters, run_stage,
                          smoothed, stage_defaults, train_step, write_metrics)

from conftest import tiny_model_config


@pytest.fixture
def small_data(tokenizer):
    return generate_dataset(11, 24, "train", tokenizer)


def groups(names):
    return {n.split(".")[0] for n in names}


def test_stage_partitions(tiny_model):
    tr, fr = partition_parameters(tiny_model.params, stage_defaults(1))
    assert groups(tr) == {"fusion", "connector"}
    assert groups(fr) == {"anchor", "augment", "lm"}
    tr, fr = partition_parameters(tiny_model.params, stage_defaults(2))
    assert groups(tr) == {"fusion", "connector", "lm"}
    assert groups(fr) == {"anchor", "augment"}
    assert all(not tiny_model.params[n].requires_grad for n in fr)


def test_anchor_only_stage1_trains_connector_only():
    model = build_model(tiny_model_config("anchor_only"), 0)
    tr, _ = partition_parameters(model.params, stage_defaults(1))
    assert groups(tr) == {"connector"}


def test_unknown_namespace_is_config_error():
    store = ParameterStore()
    store.add("decoder.w", np.zeros(2))
    with pytest.raises(ConfigError):
        partition_parameters(store, {"lm"})


def test_encoders_can_never_be_trainable():
    with pytest.raises(ConfigError):
        StageConfig(trainable_groups={"anchor", "fusion"})
    with pytest.raises(ConfigError):
        StageConfig(trainable_groups={"decoder"})
    with pytest.raises(ConfigError):
        StageConfig(stage=3)


def test_optimizer_refuses_frozen_tensors(tiny_model):
    partition_parameters(tiny_model.params, stage_defaults(1))
    with pytest.raises(ConfigError):
        AdamW(tiny_model.params, ["anchor.cls"])


def test_optimizer_state_exists_only_for_trainable_set(tiny_model):
    tr, fr = partition_parameters(tiny_model.params, stage_defaults(2))
    opt = AdamW(tiny_model.params, tr)
    assert set(opt.m) == set(opt.v) == set(tr)
    assert not set(opt.m) & set(fr)


def test_adamw_matches_scalar_oracle():
    store = ParameterStore()
    w = store.add("lm.w", Tensor(np.array([0.5, -1.0]), dtype=np.float64))
    opt = AdamW(store, ["lm.w"], weight_decay=0.1)
    grads = [np.array([0.2, -0.4]), np.array([-0.1, 0.3]), np.array([0.05, 0.0])]
    ref = [0.5, -1.0]
    m, v = [0.0, 0.0], [0.0, 0.0]
    lr = 0.01
    for t, g in enumerate(grads, start=1):
        w.grad = g.copy()
        opt.step(lr)
        for i in range(2):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
            ref[i] *= 1 - lr * 0.1
            mh, vh = m[i] / (1 - 0.9**t), v[i] / (1 - 0.999**t)
            ref[i] -= lr * mh / (math.sqrt(vh) + 1e-8)
    np.testing.assert_allclose(w.data, ref, rtol=1e-12)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), dtype=np.float64)
    b = Tensor(np.zeros(1), dtype=np.float64)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    total = math.sqrt(float(np.sum(a.grad**2) + np.sum(b.grad**2)))
    assert total == pytest.approx(1.0, rel=1e-5)
    a.grad = np.array([0.3, 0.4])
    b.grad = None
    clip_grad_norm([a, b], 1.0)
    np.testing.assert_array_equal(a.grad, [0.3, 0.4])


def test_cosine_schedule_shape():
    st_ = StageConfig(schedule="cosine", steps=100, warmup_fraction=0.03, learning_rate=1.0)
    lrs = [lr_at(st_, s) for s in range(100)]
    assert lrs[0] == pytest.approx(1 / 3)
    assert lrs[2] == pytest.approx(1.0)
    assert lrs[-1] < lrs[2]
    assert lrs[-1] == pytest.approx(0.0, abs=1e-12)
    assert all(a >= b for a, b in zip(lrs[2:], lrs[3:]))
    assert lr_at(StageConfig(), 50) == 1e-3


def test_lr_zero_leaves_weights_bitwise_unchanged(tiny_model, small_data, tokenizer):
    tr, _ = partition_parameters(tiny_model.params, stage_defaults(2))
    opt = AdamW(tiny_model.params, tr)
    before = tiny_model.params.sha256()
    texts = [s.text_ids(tokenizer) for s in small_data.samples[:4]]
    loss = train_step(tiny_model, texts, opt, 0.0, images=small_data.images[:4])
    assert math.isfinite(loss)
    assert tiny_model.params.sha256() == before
    assert all(t.grad is None for _, t in tiny_model.params.items())


def test_frozen_tensors_unchanged_after_steps(tiny_model, small_data, tokenizer):
    tr, _ = partition_parameters(tiny_model.params, stage_defaults(2))
    opt = AdamW(tiny_model.params, tr)
    frozen = tiny_model.params.sha256(["anchor", "augment"])
    trainable = tiny_model.params.sha256(["connector"])
    texts = [s.text_ids(tokenizer) for s in small_data.samples[:4]]
    for _ in range(3):
        train_step(tiny_model, texts, opt, 1e-2, images=small_data.images[:4])
    assert tiny_model.params.sha256(["anchor", "augment"]) == frozen
    assert tiny_model.params.sha256(["connector"]) != trainable


def test_non_finite_loss_aborts(tiny_model, small_data, tokenizer):
    tr, _ = partition_parameters(tiny_model.params, stage_defaults(1))
    opt = AdamW(tiny_model.params, tr)
    tiny_model.params["connector.fc2.bias"].data[0] = np.nan
    texts = [s.text_ids(tokenizer) for s in small_data.samples[:2]]
    with pytest.raises(TrainingError, match="step 7"):
        train_step(tiny_model, texts, opt, 1e-3, images=small_data.images[:2], step_index=7)


def test_sampler_is_deterministic_and_covers_epoch():
    a, b = BatchSampler(10, 3, 5), BatchSampler(10, 3, 5)
    first = [a.next() for _ in range(3)]
    assert all(np.array_equal(x, y) for x, y in zip(first, [b.next() for _ in range(3)]))
    assert len(set(np.concatenate(first).tolist())) == 9
    with pytest.raises(ConfigError):
        BatchSampler(2, 3, 0)


def test_zero_steps_is_noop(tmp_path, tiny_model, small_data):
    before = tiny_model.params.sha256()
    res = run_stage(StageConfig(steps=0, batch_size=4), small_data, tiny_model, out_dir=str(tmp_path))
    assert res.rows == [] and res.checkpoints == [res.checkpoint]
    assert tiny_model.params.sha256() == before
    assert load_checkpoint(res.checkpoint).sha256() == before


def test_run_stage_replay_is_byte_identical(tmp_path, small_data, tokenizer):
    outs = []
    for run in ("a", "b"):
        model = build_model(tiny_model_config(), 5, tokenizer)
        d = tmp_path / run
        d.mkdir()
        stage = StageConfig(stage=2, learning_rate=1e-2, steps=6, batch_size=4, ckpt_every=3, seed=2)
        res = run_stage(stage, small_data, model, out_dir=str(d))
        write_metrics(res.rows, d / "metrics.csv")
        outs.append((res, d))
    (ra, da), (rb, db) = outs
    assert ra.losses == rb.losses
    assert [p.rsplit("/", 1)[1] for p in ra.checkpoints] == ["stage2_step0.ckpt", "stage2_step3.ckpt",
                                                            "stage2_step6.ckpt"]
    assert len(set(ra.losses)) > 1
    for name in ("stage2_step3.ckpt", "stage2_step6.ckpt", "metrics.csv"):
        assert (da / name).read_bytes() == (db / name).read_bytes()


def test_different_seed_changes_trajectory(small_data, tokenizer):
    losses = []
    for seed in (1, 2):
        model = build_model(tiny_model_config(), 5, tokenizer)
        stage = StageConfig(stage=2, learning_rate=1e-2, steps=3, batch_size=4, seed=seed)
        losses.append(run_stage(stage, small_data, model).losses)
    assert losses[0] != losses[1]


def test_metrics_csv_format(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics([(1, 1, 0.5, 1e-3), (2, 1, 0.25, 1e-3)], p)
    write_metrics([(1, 2, 0.125, 2e-5)], p, append=True)
    assert p.read_text().splitlines() == ["step,stage,loss,lr", "1,1,0.5,0.001", "2,1,0.25,0.001",
                                         "1,2,0.125,2e-05"]


def test_smoothed_trailing_mean():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400), st.floats(0.0, 0.5), st.floats(1e-6, 1.0))
def test_cosine_lr_bounded_by_peak(steps, frac, peak):
    cfg = StageConfig(schedule="cosine", steps=steps, warmup_fraction=frac, learning_rate=peak)
    lrs = [lr_at(cfg, s) for s in range(steps)]
    assert all(0.0 <= v <= peak * (1 + 1e-12) for v in lrs)
