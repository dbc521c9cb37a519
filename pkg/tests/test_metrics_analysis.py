import math

import numpy as np
import pytest
from PIL import Image

from taprestore.analysis import (
    AnalysisError, attention_maps, embeddings, evaluate, export_attention, export_embeddings, export_similarity,
    read_matrix_csv, read_per_sample, score_pairs, separation, svd_rows, write_report, write_svd_csv,
)
from taprestore.backbone.model import ModelConfig, RestorationModel
from taprestore.degradation import DegradationSpec, PairedDataset, degrade, gen_clean
from taprestore.metrics import PSNR_CAP, psnr, ssim
from taprestore.prompting import PromptBank

TASKS = ["rain", "snow", "haze", "raindrop"]
TINY = ModelConfig(embed_dims=(8, 16, 16, 16, 8), depths=(1, 1, 1, 1, 1), num_heads=(2, 2, 2, 2, 2), window_size=4)


# ---------------------------------------------------------------------------
# scalar-loop oracles


def loop_psnr(a, b):
    total = 0.0
    n = 0
    for idx in np.ndindex(*a.shape):
        d = float(a[idx]) - float(b[idx])
        total += d * d
        n += 1
    return 10.0 * math.log10(1.0 / (total / n))


def loop_ssim(a, b):
    ya = [[0.299 * a[i, j, 0] + 0.587 * a[i, j, 1] + 0.114 * a[i, j, 2] for j in range(a.shape[1])]
          for i in range(a.shape[0])]
    yb = [[0.299 * b[i, j, 0] + 0.587 * b[i, j, 1] + 0.114 * b[i, j, 2] for j in range(b.shape[1])]
          for i in range(b.shape[0])]
    size, sigma = 11, 1.5
    g = [[math.exp(-((i - 5) ** 2 + (j - 5) ** 2) / (2 * sigma * sigma)) for j in range(size)] for i in range(size)]
    norm = sum(sum(r) for r in g)
    g = [[v / norm for v in r] for r in g]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(len(ya) - size + 1):
        for j in range(len(ya[0]) - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for u in range(size):
                for v in range(size):
                    w = g[u][v]
                    pa, pb = ya[i + u][j + v], yb[i + u][j + v]
                    ma += w * pa
                    mb += w * pb
                    saa += w * pa * pa
                    sbb += w * pb * pb
                    sab += w * pa * pb
            saa -= ma * ma
            sbb -= mb * mb
            sab -= ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * sab + c2)) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2)))
    return sum(vals) / len(vals)


def test_psnr_matches_loop_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
        assert abs(psnr(a, b) - loop_psnr(a, b)) < 1e-9


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(12)
    for _ in range(20):
        a = rng.uniform(size=(16, 16, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        assert abs(ssim(a, b) - loop_ssim(a, b)) < 1e-9


def test_psnr_uniform_tenth_is_twenty():
    assert psnr(np.full((16, 16, 3), 0.1), np.zeros((16, 16, 3))) == 20.0


def test_psnr_identical_is_capped():
    x = np.random.default_rng(0).uniform(size=(4, 4, 3))
    assert psnr(x, x) == PSNR_CAP


def test_ssim_identical_is_one():
    x = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_metric_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


# ---------------------------------------------------------------------------
# reports


@pytest.fixture(scope="module")
def data():
    lq, hq, tasks = [], [], []
    for ti, t in enumerate(TASKS):
        for i in range(3):
            s = degrade(gen_clean(ti * 10 + i, 16, 16), DegradationSpec(t), seed=i)
            lq.append(s.lq)
            hq.append(s.hq)
            tasks.append(t)
    return PairedDataset(np.stack(lq), np.stack(hq), tasks, list(TASKS), list(range(12)))


@pytest.fixture(scope="module")
def model():
    return RestorationModel(TINY)


def test_report_averages_are_sample_means(data):
    rep = score_pairs(data.lq, data.hq, data.tasks)
    for row in rep.rows:
        sel = [s for s in rep.per_sample if s["task"] == row["task"]]
        assert abs(row["psnr"] - np.mean([s["psnr"] for s in sel])) < 1e-9
        assert row["count"] == 3
    assert abs(rep.average["psnr"] - np.mean([s["psnr"] for s in rep.per_sample])) < 1e-9
    assert abs(rep.average["ssim"] - np.mean([s["ssim"] for s in rep.per_sample])) < 1e-9


def test_evaluate_is_pure(tmp_path, model, data):
    a = write_report(evaluate(model, data, config_hash="c", checkpoint_hash="k"), tmp_path / "a")[0]
    b = write_report(evaluate(model, data, config_hash="c", checkpoint_hash="k"), tmp_path / "b")[0]
    assert a.read_bytes() == b.read_bytes()
    rows = read_per_sample(tmp_path / "a" / "per_sample.csv")
    assert len(rows) == len(data)


def test_evaluate_single_task(model, data):
    rep = evaluate(model, data, task="snow")
    assert [r["task"] for r in rep.rows] == ["snow"]
    with pytest.raises(AnalysisError):
        evaluate(model, data, task="fog")


def test_score_pairs_shape_mismatch(data):
    with pytest.raises(AnalysisError):
        score_pairs(data.lq[:2], data.hq[:3], data.tasks[:2])


# ---------------------------------------------------------------------------
# prompt analyses


def test_similarity_export_roundtrip(tmp_path):
    bank = PromptBank([8, 16], TASKS, length=3, rank=2, seed=0)
    sim = export_similarity(bank, tmp_path / "sim.csv")
    labels, back = read_matrix_csv(tmp_path / "sim.csv")
    assert labels == TASKS
    assert np.array_equal(back, sim)


def test_svd_export(tmp_path):
    bank = PromptBank([8], ["a", "b"], length=12, rank=4, init_std=1.0)
    rows = svd_rows(bank)
    assert len(rows) == 1 * 2 * 2 * 8
    top4 = [r["cumulative_energy"] for r in rows if r["k"] == 4]
    assert min(top4) > 0.999
    write_svd_csv(bank, tmp_path / "svd.csv")
    assert (tmp_path / "svd.csv").read_text().startswith("layer,slot,task,k,")


# ---------------------------------------------------------------------------
# attention / embeddings


def test_attention_rows_sum_to_one(model, data):
    bank = PromptBank(model.attention_dims(), TASKS, length=3, rank=2, init_std=0.5)
    maps = attention_maps(model, data.lq[0], "rain", 0, bank)
    assert maps.shape == (2, 16, 19)
    np.testing.assert_allclose(maps.sum(-1), 1.0, atol=1e-12)


def test_zero_length_attention_export_matches_no_prompt(tmp_path, model, data):
    empty = PromptBank(model.attention_dims(), TASKS, length=0, rank=0)
    a = export_attention(model, data.lq[0], "rain", 1, tmp_path, "no_prompt")
    b = export_attention(model, data.lq[0], "rain", 1, tmp_path, "empty", empty)
    for p, q in zip(a, b):
        assert p.read_bytes() == q.read_bytes()


def test_prompt_attention_export_differs(tmp_path, model, data):
    bank = PromptBank(model.attention_dims(), TASKS, length=3, rank=2, init_std=0.5)
    a = export_attention(model, data.lq[3], "snow", 0, tmp_path, "no_prompt")
    b = export_attention(model, data.lq[3], "snow", 0, tmp_path, "prompt", bank)
    assert a[0].relative_to(tmp_path).as_posix() == "no_prompt/attn/0/0.png"
    diffs = []
    for p, q in zip(a, b):
        x = np.asarray(Image.open(p), dtype=float)
        y = np.asarray(Image.open(q), dtype=float)
        diffs.append(np.abs(x[:, :min(x.shape[1], y.shape[1])] - y[:, :min(x.shape[1], y.shape[1])]).mean()
                     if x.shape != y.shape else np.abs(x - y).mean())
    assert max(diffs) > 0


def test_attention_layer_range(model, data):
    with pytest.raises(AnalysisError):
        attention_maps(model, data.lq[0], "rain", 99)


def test_embeddings_rows_and_dims(tmp_path, model, data):
    path = export_embeddings(model, data, tmp_path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(data) + 1
    widths = {len(line.split(",")) for line in lines}
    assert widths == {2 + 16}
    assert path.relative_to(tmp_path).as_posix() == "embed/bottleneck.csv"
    with pytest.raises(AnalysisError):
        embeddings(model, data, layer="stage0")


def test_separation_statistic():
    emb = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    within, cross = separation(emb, ["a", "a", "b", "b"])
    assert within > cross
