import csv
import math

import numpy as np
import pytest

from taprestore.autodiff import Tensor, set_check_finite
from taprestore.backbone.model import ModelConfig, RestorationModel
from taprestore.checkpoint import (
    Checkpoint, CheckpointError, decode, encode, file_sha256, load_checkpoint, save_checkpoint,
)
from taprestore.config import ConfigError, TrainConfig
from taprestore.degradation import DegradationSpec, PairedDataset, degrade, gen_clean
from taprestore.metrics import psnr
from taprestore.nn import param_count
from taprestore.objectives import FeatureExtractor, LossWeights
from taprestore.prompting import default_graph
from taprestore.training import (
    Adam, BackboneModified, TrainingAborted, _trainable, augment, backbone_hash, balanced_batches, build_bank,
    clip_grad_norm, cosine_lr, expected_prompt_count, flip, joint_train, predict, pretrain, prompt_tune, resolve_prompt,
    restore, train_stage, trainable_count,
)

TASKS = ["rain", "snow", "haze", "raindrop"]
TINY = ModelConfig(embed_dims=(8, 16, 16, 16, 8), depths=(1, 1, 1, 1, 1), num_heads=(2, 2, 2, 2, 2), window_size=4)


def tiny_data(per_task=4, size=16, seed=0):
    lq, hq, tasks = [], [], []
    for ti, t in enumerate(TASKS):
        for i in range(per_task):
            clean = gen_clean(seed * 1000 + ti * 100 + i, size, size)
            s = degrade(clean, DegradationSpec(t), seed=ti * 100 + i)
            lq.append(s.lq)
            hq.append(s.hq)
            tasks.append(t)
    return PairedDataset(np.stack(lq), np.stack(hq), tasks, list(TASKS), list(range(len(tasks))))


def tc(stage, epochs=2, lr=1e-3, **kw):
    return TrainConfig(stage=stage, epochs=epochs, batch_size=4, lr_init=lr, crop_size=16, tasks=list(TASKS), **kw)


@pytest.fixture(scope="module")
def data():
    return tiny_data()


@pytest.fixture(scope="module")
def pretrained(data):
    return pretrain(tc("pretrain"), RestorationModel(TINY), data, LossWeights(), FeatureExtractor())


# ---------------------------------------------------------------------------
# batching / augmentation


def test_balanced_batches_uniform():
    labels = [t for t in TASKS for _ in range(6)]
    for epoch in range(3):
        for b in balanced_batches(labels, 8, seed=1, epoch=epoch):
            counts = {t: sum(labels[i] == t for i in b) for t in TASKS}
            assert set(counts.values()) == {2}


def test_balanced_batches_deterministic_and_epoch_dependent():
    labels = [t for t in TASKS for _ in range(6)]
    a = balanced_batches(labels, 8, 3, 0)
    b = balanced_batches(labels, 8, 3, 0)
    c = balanced_batches(labels, 8, 3, 1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_balanced_batches_count():
    labels = [t for t in TASKS for _ in range(10)]
    assert len(balanced_batches(labels, 8, 0)) == 5


def test_balanced_batches_indivisible():
    with pytest.raises(ConfigError):
        balanced_batches(TASKS, 6, 0)


def test_augment_identity(rng):
    lq, hq = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    a, b = augment(lq, hq, 8, 0.0, rng)
    assert np.array_equal(a, lq) and np.array_equal(b, hq)


def test_flip_twice_identity(rng):
    x = rng.uniform(size=(5, 6, 3))
    assert np.array_equal(flip(flip(x, 1), 1), x)
    assert np.array_equal(flip(flip(x, 0), 0), x)


def test_augment_keeps_alignment():
    clean = gen_clean(3, 64, 64)
    s = degrade(clean, DegradationSpec("rain"), seed=5)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        probe = np.random.default_rng(seed)
        y = int(probe.integers(0, 64 - 32 + 1))
        x = int(probe.integers(0, 64 - 32 + 1))
        ref = psnr(s.lq[y:y + 32, x:x + 32], s.hq[y:y + 32, x:x + 32])
        a, b = augment(s.lq, s.hq, 32, 0.5, rng)
        assert abs(psnr(a, b) - ref) < 0.01


def test_augment_crop_too_large(rng):
    with pytest.raises(ConfigError):
        augment(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), 16, 0.5, rng)


# ---------------------------------------------------------------------------
# schedule / optimizer


def test_cosine_endpoints():
    assert cosine_lr(0, 100, 3e-4, 3e-6) == 3e-4
    assert abs(cosine_lr(100, 100, 3e-4, 3e-6) - 3e-6) < 1e-12
    assert abs(cosine_lr(50, 100, 3e-4, 3e-6) - (3e-4 + 3e-6) / 2) < 1e-12
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1.0, 0.0)


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 0.0])
    opt = Adam([("p", p)])
    opt.step(0.1)
    # bias-corrected first update is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-7)


def test_adam_state_roundtrip():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.ones(3)
    opt.step(0.01)
    other = Adam([("p", Tensor(np.ones(3), requires_grad=True))])
    other.load_state(opt.state_tensors(), opt.t)
    assert np.array_equal(other.m["p"], opt.m["p"]) and other.t == 1
    with pytest.raises(ConfigError):
        other.load_state({}, 1)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([a], 1.0) == 5.0
    assert np.linalg.norm(a.grad) == pytest.approx(1.0)
    a.grad = np.array([0.3, 0.4])
    clip_grad_norm([a], None)
    assert np.array_equal(a.grad, [0.3, 0.4])


def test_resolve_prompt_defaults():
    assert resolve_prompt("p_attn_enhanced").rank == 4
    assert resolve_prompt("p_attn").rank == 0
    assert resolve_prompt("p_attn", length=3).length == 3
    assert resolve_prompt("p_full").bank_strategy == "full"
    assert resolve_prompt("p_attn_joint").joint
    with pytest.raises(ConfigError):
        resolve_prompt("bogus")


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_bytes_stable(tmp_path, pretrained):
    p1 = save_checkpoint(pretrained.checkpoint, tmp_path / "a.ckpt")
    p2 = save_checkpoint(load_checkpoint(p1), tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_truncated(tmp_path, pretrained):
    p = save_checkpoint(pretrained.checkpoint, tmp_path / "a.ckpt")
    raw = p.read_bytes()
    for cut in (10, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")


def test_checkpoint_corrupt_and_version(pretrained):
    raw = bytearray(encode(pretrained.checkpoint))
    raw[-1] ^= 0xFF
    with pytest.raises(CheckpointError, match="hash"):
        decode(bytes(raw))
    raw = bytearray(encode(pretrained.checkpoint))
    raw[8] = 99
    with pytest.raises(CheckpointError, match="version"):
        decode(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"X" * 64)


def test_checkpoint_header_echoes_config(pretrained):
    h = pretrained.checkpoint.header
    assert TrainConfig.from_dict(h["train"]) == tc("pretrain")
    assert h["model_config"] == TINY.to_dict()
    assert h["optimizer"]["beta1"] == 0.9 and h["optimizer"]["eps"] == 1e-8


def test_checkpoint_roundtrip_empty():
    ck = Checkpoint({"stage": "x"}, {})
    assert decode(encode(ck)).header == {"stage": "x"}


# ---------------------------------------------------------------------------
# stages


def test_restore_keeps_key_bias(pretrained, data):
    setup = resolve_prompt("p_attn", length=2, key_bias=-2.5)
    res = prompt_tune(tc("tune", epochs=1), pretrained.checkpoint, data, default_graph(TASKS),
                      LossWeights(lambda_cont=0.0), setup)
    model, bank = restore(res.checkpoint)
    assert bank.key_bias == -2.5
    again, bank2 = restore(res.checkpoint)
    np.testing.assert_array_equal(predict(model, data.lq[:2], data.tasks[:2], bank),
                                  predict(again, data.lq[:2], data.tasks[:2], bank2))


def test_restore_reproduces_predictions(pretrained, data):
    model, bank = restore(pretrained.checkpoint)
    assert bank is None
    assert backbone_hash(model) == pretrained.checkpoint.header["backbone_sha256"]


def test_pretrain_writes_metrics(tmp_path, data):
    res = pretrain(tc("pretrain", epochs=1), RestorationModel(TINY), data, LossWeights(), FeatureExtractor(),
                   run_dir=tmp_path)
    with (tmp_path / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(res.losses) == 4
    assert set(rows[0]) >= {"step", "stage", "loss", "l1", "perceptual"}
    assert float(rows[-1]["lr"]) == pytest.approx(1e-5, abs=1e-15)


def test_final_step_lr_is_lr_min(tmp_path, data):
    pretrain(tc("pretrain", epochs=2), RestorationModel(TINY), data, LossWeights(), FeatureExtractor(),
             run_dir=tmp_path)
    with (tmp_path / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["lr"]) == 1e-3
    assert abs(float(rows[-1]["lr"]) - 1e-5) < 1e-18


def test_resume_matches_uninterrupted(tmp_path, data):
    cfg = tc("pretrain", epochs=3, checkpoint_every=1)
    full = pretrain(cfg, RestorationModel(TINY), data, LossWeights(), FeatureExtractor(), run_dir=tmp_path / "a")
    mid = load_checkpoint(tmp_path / "a" / "pretrain_epoch0001.ckpt")
    resumed = pretrain(cfg, RestorationModel(TINY), data, LossWeights(), FeatureExtractor(),
                       run_dir=tmp_path / "b", resume=mid)
    assert resumed.losses == full.losses[4:]
    assert encode(resumed.checkpoint) == encode(full.checkpoint)


def test_stage_determinism(data):
    a = pretrain(tc("pretrain", epochs=1), RestorationModel(TINY), data, LossWeights(), FeatureExtractor())
    b = pretrain(tc("pretrain", epochs=1), RestorationModel(TINY), data, LossWeights(), FeatureExtractor())
    assert encode(a.checkpoint) == encode(b.checkpoint)


@pytest.mark.parametrize("strategy", ["p_attn", "p_attn_enhanced", "p_full"])
def test_tune_freezes_backbone(strategy, pretrained, data, tmp_path):
    setup = resolve_prompt(strategy, length=2)
    lam = 0.1 if setup.contrastive else 0.0
    res = prompt_tune(tc("tune", epochs=1, eval_per_task=1), pretrained.checkpoint, data, default_graph(TASKS),
                      LossWeights(lambda_cont=lam), setup, eval_data=data, run_dir=tmp_path)
    assert res.checkpoint.header["backbone_sha256"] == pretrained.checkpoint.header["backbone_sha256"]
    assert res.checkpoint.header["parent_backbone_sha256"] == pretrained.checkpoint.header["backbone_sha256"]
    model, bank = restore(res.checkpoint)
    assert backbone_hash(model) == pretrained.checkpoint.header["backbone_sha256"]
    assert {r["task"] for r in res.eval_rows} == set(TASKS)
    assert (tmp_path / "eval.csv").exists()


def test_tune_trainable_count_matches_formula(pretrained, data):
    setup = resolve_prompt("p_attn_enhanced")
    model, _ = restore(pretrained.checkpoint)
    bank = build_bank(model, TASKS, setup)
    named = _trainable("tune", model, bank)
    assert sum(p.size for _, p in named) == expected_prompt_count(bank)
    assert trainable_count(model, bank) == expected_prompt_count(bank)
    assert param_count(model, trainable_only=True) == 0


def test_tune_detects_backbone_change(pretrained, data):
    setup = resolve_prompt("p_attn", length=2)
    model, _ = restore(pretrained.checkpoint)
    bank = build_bank(model, TASKS, setup)

    def tamper(epoch, mean):
        model.embed.weight.data = model.embed.weight.data + 1e-9

    with pytest.raises(BackboneModified):
        train_stage(tc("tune", epochs=2), model, bank, data, LossWeights(lambda_cont=0.0), setup,
                    default_graph(TASKS), on_epoch=tamper)


def test_tune_requires_pretrain_checkpoint(pretrained, data):
    setup = resolve_prompt("p_attn", length=2)
    res = prompt_tune(tc("tune", epochs=1), pretrained.checkpoint, data, default_graph(TASKS),
                      LossWeights(lambda_cont=0.0), setup)
    with pytest.raises(ConfigError):
        prompt_tune(tc("tune", epochs=1), res.checkpoint, data, default_graph(TASKS), LossWeights(), setup)
    with pytest.raises(ConfigError):
        prompt_tune(tc("tune", epochs=1), pretrained.checkpoint, data, default_graph(TASKS), LossWeights(),
                    resolve_prompt("none"))


def test_joint_trains_backbone_and_prompts(data):
    model = RestorationModel(TINY)
    before = backbone_hash(model)
    setup = resolve_prompt("p_attn_joint", length=2)
    res = joint_train(tc("joint", epochs=1), model, data, LossWeights(lambda_cont=0.0), FeatureExtractor(), setup,
                      default_graph(TASKS))
    m, bank = restore(res.checkpoint)
    assert backbone_hash(m) != before
    assert bank is not None and bank.length == 2


def test_nan_aborts_with_diagnostics(data):
    bad = PairedDataset(data.lq.copy(), data.hq.copy(), data.tasks, data.task_names, data.seeds)
    bad.hq[0, 0, 0, 0] = np.nan
    set_check_finite(False)
    try:
        with pytest.raises(TrainingAborted) as err:
            pretrain(tc("pretrain", epochs=1), RestorationModel(TINY), bad, LossWeights(lambda_per=0.0), None)
    finally:
        set_check_finite(True)
    e = err.value
    assert e.epoch == 0 and e.step >= 0 and math.isfinite(e.lr) and len(e.batch_seed) == 3


def test_resume_stage_mismatch(pretrained, data):
    with pytest.raises(ConfigError):
        pretrain(tc("pretrain"), RestorationModel(TINY), data, LossWeights(), FeatureExtractor(),
                 resume=Checkpoint({"stage": "tune"}, {}))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(stage="x", epochs=1, batch_size=4, lr_init=1e-3)
    with pytest.raises(ConfigError):
        TrainConfig(stage="pretrain", epochs=0, batch_size=4, lr_init=1e-3)
    with pytest.raises(ConfigError):
        TrainConfig(stage="pretrain", epochs=1, batch_size=6, lr_init=1e-3)


def test_file_sha256(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"abc")
    assert file_sha256(p) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
