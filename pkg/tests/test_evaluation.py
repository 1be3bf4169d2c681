import numpy as np
import pytest

from ftz import evaluation
from ftz.config import from_dict
from ftz.data import SyntheticDataset, generate_dataset
from ftz.errors import ConfigError
from ftz.evaluation import compare_towers, evaluate, initial_model, pretrained_lm
from ftz.mllm import Tokenizer, greedy_decode
from ftz.rng import Rng


def tiny_run_config(**stage):
    steps = stage.get("steps", 0)
    return from_dict({
        "seed": 4,
        "model": {"image_size": 32, "patch_size": 8, "anchor_depth": 2, "anchor_dim": 16, "anchor_heads": 2,
                  "augment_depth": 2, "augment_dim": 12, "augment_heads": 2, "fusion_heads": 2,
                  "num_fusion_points": 2, "connector_hidden": 16, "lm_vocab_size": 32, "lm_dim": 16,
                  "lm_depth": 1, "lm_heads": 2, "lm_max_seq_len": 48, "lm_warmup_steps": 20,
                  "lm_warmup_batch_size": 4},
        "stage1": {"steps": steps, "batch_size": 4},
        "stage2": {"steps": steps, "batch_size": 4},
        "data": {"train_size": 12, "eval_size": 12},
    })


@pytest.fixture(scope="module")
def tiny_cfg():
    return tiny_run_config()


@pytest.fixture(scope="module")
def warm(tiny_cfg):
    return pretrained_lm(tiny_cfg)


def random_head(model, seed=0):
    d, v = model.params["lm.head.weight"].shape
    model.params["lm.head.weight"].data[...] = Rng(seed).normal((d, v))


def test_gold_model_scores_one(monkeypatch, tiny_model, tokenizer):
    ds = generate_dataset(2, 30, "eval", tokenizer)
    gold = {s.image.tobytes() + bytes(s.question_ids): s.answer_ids for s in ds}

    def oracle(model, images, question_ids, max_new, prefix=None, pad_to=None):
        return [list(gold[img.tobytes() + bytes(q)]) for img, q in zip(images, question_ids)]

    monkeypatch.setattr(evaluation, "greedy_decode", oracle)
    rep = evaluate(tiny_model, ds)
    assert rep.accuracy == {"caption": 1.0, "count": 1.0, "exist": 1.0}
    assert rep.counts == {"caption": 10, "count": 10, "exist": 10}
    assert rep.overall == 1.0


def test_empty_dataset_is_an_error(tiny_model, tokenizer):
    with pytest.raises(ConfigError, match="empty"):
        evaluate(tiny_model, SyntheticDataset([], 0, "eval", tokenizer.fingerprint))


def test_vocabulary_mismatch(tiny_model):
    other = Tokenizer(list(Tokenizer().tokens[::-1]))
    ds = generate_dataset(1, 3, "eval", Tokenizer())
    ds.vocab_fingerprint = other.fingerprint
    with pytest.raises(ConfigError, match="vocabulary"):
        evaluate(tiny_model, ds)


def test_constant_answer_model_on_balanced_exist_split(tiny_model, tokenizer):
    # zero head weights, bias favouring "yes": every answer is "yes" with a one-token budget
    tiny_model.params["lm.head.bias"].data[tokenizer.ids["yes"]] = 1.0
    ds = generate_dataset(3, 40, "eval", tokenizer, tasks=("exist",))
    rep = evaluate(tiny_model, ds, max_new=1)
    assert rep.accuracy == {"exist": 0.5}


def test_accuracy_matches_per_sample_decode_replay(tiny_model, tokenizer):
    random_head(tiny_model, 1)
    ds = generate_dataset(5, 18, "eval", tokenizer)
    rep = evaluate(tiny_model, ds, max_new=3, caption_max_new=6, batch_size=4)
    pad_to = 1 + max(len(s.question_ids) for s in ds) + 6
    hits = {}
    for s in ds:
        budget = 6 if s.task == "caption" else 3
        pred = greedy_decode(tiny_model, s.image, s.question_ids, budget, pad_to=pad_to)
        hits.setdefault(s.task, []).append(pred == s.answer_ids)
    assert rep.accuracy == {t: sum(h) / len(h) for t, h in hits.items()}


def test_evaluation_is_order_invariant(tiny_model, tokenizer):
    random_head(tiny_model, 2)
    ds = generate_dataset(6, 24, "eval", tokenizer)
    perm = np.random.default_rng(0).permutation(24)
    a = evaluate(tiny_model, ds)
    b = evaluate(tiny_model, ds.subset(perm))
    assert a.accuracy == b.accuracy
    assert [a.predictions[i] for i in perm] == b.predictions


def test_report_csv(tiny_model, tokenizer):
    rep = evaluate(tiny_model, generate_dataset(1, 6, "eval", tokenizer), seed=9)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "mode,seed,task,n,accuracy"
    assert lines[1].startswith("ftz,9,caption,2,")


def test_initial_model_copies_warm_lm_and_freezes_everything(tiny_cfg, warm):
    m = initial_model(tiny_cfg, 1, "anchor_only", warm_lm=warm)
    for name in warm.names():
        assert m.params[name].data.tobytes() == warm[name].data.tobytes()
    assert m.params.trainable_names() == []


def test_warm_lm_is_not_the_zero_head(warm):
    assert np.any(warm["lm.head.weight"].data != 0)


def test_zero_step_comparison_identity(tmp_path, tiny_cfg, warm):
    out = tmp_path / "cmp.csv"
    comp = compare_towers(tiny_cfg, [1, 2], out_path=str(out), warm_lm=warm)
    rows = comp.rows()
    assert rows[0] == ["mode", "seed", "caption", "count", "exist"]
    per_seed = [r for r in rows[1:] if r[1] != "mean"]
    assert len(per_seed) == 3 * 2
    assert [r[0] for r in rows[1:] if r[1] == "mean"] == ["ftz", "anchor_only", "interleaved_mof"]
    by = {(r.mode, r.seed): r for r in comp.reports}
    for seed in (1, 2):
        assert by["ftz", seed].accuracy == by["anchor_only", seed].accuracy
        assert by["ftz", seed].predictions == by["anchor_only", seed].predictions
        assert len(set(comp.init_hashes[seed].values())) == 1
    assert out.read_text() == comp.to_csv()


def test_comparison_is_deterministic(tiny_cfg, warm):
    cfg = tiny_run_config(steps=2)
    a = compare_towers(cfg, [3], modes=("ftz",), warm_lm=warm).to_csv()
    b = compare_towers(cfg, [3], modes=("ftz",), warm_lm=warm).to_csv()
    assert a == b
