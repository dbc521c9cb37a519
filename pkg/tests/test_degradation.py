import json

import numpy as np
import pytest

from taprestore.backbone.model import soft_reconstruct
from taprestore.degradation import (
    TASKS, ConfigError, DatasetIOError, DegradationSpec, HazeParams, RainParams, RaindropParams, SnowParams,
    apply_haze, apply_rain, apply_raindrop, apply_snow, build_dataset, degrade, gen_clean, haze_coefficients,
    load_dataset, load_manifest, load_png, manifest_hash, params_from_dict, residual_spectrum, sample_seed,
    save_png,
)


def test_gen_clean_deterministic():
    assert gen_clean(1, 32, 32).tobytes() == gen_clean(1, 32, 32).tobytes()


def test_gen_clean_seeds_differ():
    a, b = gen_clean(1, 32, 32), gen_clean(2, 32, 32)
    assert np.mean(np.any(a != b, axis=-1)) >= 0.01


def test_gen_clean_range():
    for s in range(100):
        img = gen_clean(s, 16, 16)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert img.shape == (16, 16, 3)


def test_gen_clean_rejects_tiny():
    with pytest.raises(ValueError):
        gen_clean(0, 8, 8)


def test_haze_identity_when_clear():
    hq = gen_clean(3, 16, 16)
    out = apply_haze(hq, np.ones((16, 16)), (0.8, 0.8, 0.8))
    assert np.array_equal(out.lq, hq)


def test_haze_half_transmission_on_black():
    out = apply_haze(np.zeros((16, 16, 3)), np.full((16, 16), 0.5), (1.0, 1.0, 1.0))
    assert np.array_equal(out.lq, np.full((16, 16, 3), 0.5))


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.2])
def test_haze_rejects_bad_transmission(bad):
    with pytest.raises(ValueError):
        apply_haze(np.zeros((16, 16, 3)), np.full((16, 16), bad), (1.0, 1.0, 1.0))


def test_haze_coefficients_invert(rng):
    hq = rng.uniform(size=(16, 16, 3))
    t = rng.uniform(0.4, 0.9, size=(16, 16))
    a = rng.uniform(0.7, 1.0, size=3)
    deg = apply_haze(hq, t, a)
    k, r = haze_coefficients(t, a)
    o = np.concatenate([k, r], axis=-1)[None]
    rec = soft_reconstruct(o, deg.lq[None]).data[0]
    assert np.max(np.abs(rec - hq)) < 1e-9


def test_zero_count_degradations_are_identity():
    hq = gen_clean(5, 32, 32)
    assert np.array_equal(apply_rain(hq, RainParams(streak_count=0), 1).lq, hq)
    assert np.array_equal(apply_snow(hq, SnowParams(flake_count=0), 1).lq, hq)
    assert np.array_equal(apply_raindrop(hq, RaindropParams(drop_count=0), 1).lq, hq)


def test_single_streak_follows_angle():
    hq = np.zeros((64, 64, 3))
    out = apply_rain(hq, RainParams(streak_count=1, angle_deg=70.0, length_px=30.0, intensity=1.0), 7)
    diff = np.abs(out.lq - hq).max(axis=-1)
    assert diff.max() > 0
    ys, xs = np.nonzero(diff > 0.5 * diff.max())
    # principal axis of the changed pixels; angle measured with rows as the y axis
    cov = np.cov(np.stack([xs, ys]).astype(float))
    vals, vecs = np.linalg.eigh(cov)
    v = vecs[:, np.argmax(vals)]
    angle = np.degrees(np.arctan2(v[1], v[0])) % 180.0
    assert abs(angle - 70.0) < 5.0


def test_snow_and_raindrop_spectra_closer_than_snow_and_haze():
    specs = {t: DegradationSpec(t) for t in ("snow", "raindrop", "haze")}
    spectra = {}
    for t, spec in specs.items():
        samples = [degrade(gen_clean(1000 + i, 32, 32), spec, seed=i) for i in range(100)]
        spectra[t] = residual_spectrum(samples)
    d_sr = np.linalg.norm(spectra["snow"] - spectra["raindrop"])
    d_sh = np.linalg.norm(spectra["snow"] - spectra["haze"])
    assert d_sr < d_sh


@pytest.mark.parametrize("task", TASKS)
def test_degrade_range_and_determinism(task):
    hq = gen_clean(9, 32, 32)
    a = degrade(hq, DegradationSpec(task), seed=4)
    b = degrade(hq, DegradationSpec(task), seed=4)
    assert a.lq.tobytes() == b.lq.tobytes()
    assert a.lq.min() >= 0.0 and a.lq.max() <= 1.0
    assert not np.array_equal(a.lq, hq)


@pytest.mark.parametrize("params", [
    HazeParams(t_min=0.0), HazeParams(t_min=0.9, t_max=0.4), HazeParams(airlight=(1.0, 2.0, 0.5)),
    RainParams(intensity=1.5), RainParams(streak_count=-1), SnowParams(radius_min=3, radius_max=1),
    RaindropParams(darkening=-0.1),
])
def test_invalid_params_name_field(params):
    with pytest.raises(ConfigError, match=r"\w+\.\w+|radius"):
        params.validate()


def test_params_from_dict_rejects_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        params_from_dict("rain", {"bogus": 1})


def test_spec_rejects_unknown_task():
    with pytest.raises(ConfigError):
        DegradationSpec("fog")


def test_spec_accepts_dict_params():
    spec = DegradationSpec("haze", params={"t_min": 0.5, "airlight": [0.9, 0.9, 0.9]})
    assert spec.params.airlight == (0.9, 0.9, 0.9)


def test_sample_seed_distinct():
    seeds = {sample_seed(0, t, i) for t in range(4) for i in range(50)}
    assert len(seeds) == 200


def test_png_roundtrip_quantization(tmp_path, rng):
    img = rng.uniform(size=(16, 16, 3))
    save_png(tmp_path / "x.png", img)
    back = load_png(tmp_path / "x.png")
    assert np.max(np.abs(back - img)) <= 1 / 255


def test_load_png_missing(tmp_path):
    with pytest.raises(DatasetIOError):
        load_png(tmp_path / "nope.png")


def test_build_dataset_counts_and_hash(tmp_path):
    m = build_dataset(tmp_path / "a", per_task_count=8, size=32, seed=3)
    assert len(m["samples"]) == 32
    for t in TASKS:
        assert sum(s["task"] == t for s in m["samples"]) == 8
    build_dataset(tmp_path / "b", per_task_count=8, size=32, seed=3)
    assert manifest_hash(tmp_path / "a") == manifest_hash(tmp_path / "b")
    h = manifest_hash(tmp_path / "a")
    build_dataset(tmp_path / "a", per_task_count=8, size=32, seed=3)
    assert manifest_hash(tmp_path / "a") == h
    for s in m["samples"]:
        assert (tmp_path / "a" / s["lq"]).read_bytes() == (tmp_path / "b" / s["lq"]).read_bytes()


def test_haze_manifest_records_truth(tmp_path):
    m = build_dataset(tmp_path, per_task_count=2, size=32, seed=0, tasks=("haze",))
    lo, hi = m["samples"][0]["truth"]["t_range"]
    assert 0.4 <= lo <= hi <= 0.9


def test_load_dataset_roundtrip(tmp_path):
    build_dataset(tmp_path, per_task_count=2, size=32, seed=0)
    data = load_dataset(tmp_path)
    assert data.lq.shape == (8, 32, 32, 3)
    assert data.task_names == list(TASKS)
    assert list(data.indices_for("snow")) == [2, 3]
    sub = data.subset([1, 2])
    assert sub.tasks == ["rain", "snow"]


def test_manifest_version_checked(tmp_path):
    build_dataset(tmp_path, per_task_count=1, size=16, seed=0)
    raw = json.loads((tmp_path / "manifest.json").read_text())
    raw["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(ConfigError):
        load_manifest(tmp_path)


def test_unwritable_root(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetIOError):
        build_dataset(blocker / "sub", per_task_count=1, size=16)
