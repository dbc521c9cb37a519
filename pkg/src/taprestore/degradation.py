"""Procedural clean images and parametric weather degradations.

Images are (H, W, 3) float64 arrays in [0, 1]. Every generator is a pure
function of its seed, so a (spec, seed) pair fixes the output bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

TASKS = ("rain", "snow", "haze", "raindrop")
MANIFEST_VERSION = 1
REFERENCE_AREA = 64 * 64


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class DatasetIOError(OSError):
    """Filesystem failure while reading or writing a dataset."""


# ---------------------------------------------------------------------------
# parameter records


@dataclass
class HazeParams:
    t_min: float = 0.4
    t_max: float = 0.9
    airlight: tuple = (0.85, 0.85, 0.85)

    def validate(self) -> None:
        if not 0.0 < self.t_min <= 1.0:
            raise ConfigError(f"haze.t_min must lie in (0, 1], got {self.t_min}")
        if not 0.0 < self.t_max <= 1.0:
            raise ConfigError(f"haze.t_max must lie in (0, 1], got {self.t_max}")
        if self.t_min > self.t_max:
            raise ConfigError(f"haze.t_min ({self.t_min}) exceeds haze.t_max ({self.t_max})")
        if len(self.airlight) != 3 or any(not 0.0 <= a <= 1.0 for a in self.airlight):
            raise ConfigError(f"haze.airlight must be three values in [0, 1], got {self.airlight}")


@dataclass
class RainParams:
    streak_count: int = 40
    angle_deg: float = 70.0
    length_px: float = 12.0
    intensity: float = 0.45

    def validate(self) -> None:
        if self.streak_count < 0:
            raise ConfigError(f"rain.streak_count must be >= 0, got {self.streak_count}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ConfigError(f"rain.intensity must lie in [0, 1], got {self.intensity}")
        if self.length_px <= 0:
            raise ConfigError(f"rain.length_px must be positive, got {self.length_px}")


@dataclass
class SnowParams:
    flake_count: int = 30
    radius_min: float = 1.0
    radius_max: float = 2.5
    opacity: float = 0.8

    def validate(self) -> None:
        if self.flake_count < 0:
            raise ConfigError(f"snow.flake_count must be >= 0, got {self.flake_count}")
        if not 0.0 < self.radius_min <= self.radius_max:
            raise ConfigError(f"snow radius range must satisfy 0 < radius_min <= radius_max, "
                              f"got ({self.radius_min}, {self.radius_max})")
        if not 0.0 <= self.opacity <= 1.0:
            raise ConfigError(f"snow.opacity must lie in [0, 1], got {self.opacity}")


@dataclass
class RaindropParams:
    drop_count: int = 8
    radius_min: float = 2.5
    radius_max: float = 5.0
    blur_radius: float = 2.0
    darkening: float = 0.35

    def validate(self) -> None:
        if self.drop_count < 0:
            raise ConfigError(f"raindrop.drop_count must be >= 0, got {self.drop_count}")
        if not 0.0 < self.radius_min <= self.radius_max:
            raise ConfigError(f"raindrop radius range must satisfy 0 < radius_min <= radius_max, "
                              f"got ({self.radius_min}, {self.radius_max})")
        if self.blur_radius < 0:
            raise ConfigError(f"raindrop.blur_radius must be >= 0, got {self.blur_radius}")
        if not 0.0 <= self.darkening <= 1.0:
            raise ConfigError(f"raindrop.darkening must lie in [0, 1], got {self.darkening}")


PARAM_TYPES = {"rain": RainParams, "snow": SnowParams, "haze": HazeParams, "raindrop": RaindropParams}


@dataclass
class DegradationSpec:
    task: str
    seed: int = 0
    params: object = None

    def __post_init__(self):
        if self.task not in PARAM_TYPES:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.params is None:
            self.params = PARAM_TYPES[self.task]()
        elif isinstance(self.params, dict):
            self.params = params_from_dict(self.task, self.params)
        self.params.validate()


def params_from_dict(task: str, raw: dict):
    cls = PARAM_TYPES[task]
    allowed = set(cls.__dataclass_fields__)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown {task} parameter(s): {unknown}")
    values = dict(raw)
    if "airlight" in values:
        values["airlight"] = tuple(values["airlight"])
    obj = cls(**values)
    obj.validate()
    return obj


@dataclass
class DegradationSample:
    lq: np.ndarray
    hq: np.ndarray
    task: str
    truth: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# clean images


def gen_clean(seed: int, height: int, width: int) -> np.ndarray:
    """Smooth gradient + shapes + band-limited texture, values in [0, 1]."""
    if height < 16 or width < 16:
        raise ConfigError(f"image size must be at least 16x16, got {height}x{width}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / np.array([height, width]).reshape(2, 1, 1)

    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    img = c0 + (c1 - c0) * ramp[..., None]

    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0.0, 1.0, 3)
        alpha = rng.uniform(0.5, 1.0)
        y0, x0 = rng.integers(0, height), rng.integers(0, width)
        hh, ww = rng.integers(height // 8, height // 2), rng.integers(width // 8, width // 2)
        sl = (slice(y0, min(y0 + hh, height)), slice(x0, min(x0 + ww, width)))
        img[sl] = (1 - alpha) * img[sl] + alpha * color
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0.0, 1.0, 3)
        alpha = rng.uniform(0.5, 1.0)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(min(height, width) / 12, min(height, width) / 4)
        inside = ((np.arange(height)[:, None] - cy) ** 2 + (np.arange(width)[None, :] - cx) ** 2) <= r * r
        img[inside] = (1 - alpha) * img[inside] + alpha * color

    noise = ndimage.gaussian_filter(rng.normal(0, 1, (height, width, 3)), sigma=(1.5, 1.5, 0))
    noise /= max(np.abs(noise).max(), 1e-12)
    img = img + 0.06 * noise
    return np.clip(img, 0.0, 1.0)


def _smooth_field(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Depth-like field in [0, 1]: a random ramp plus low-frequency noise."""
    yy, xx = np.mgrid[0:height, 0:width] / np.array([height, width]).reshape(2, 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    blob = ndimage.gaussian_filter(rng.normal(0, 1, (height, width)), sigma=max(height, width) / 6, mode="wrap")
    blob /= max(np.abs(blob).max(), 1e-12)
    f = ramp + 0.5 * blob
    return (f - f.min()) / max(f.max() - f.min(), 1e-12)


# ---------------------------------------------------------------------------
# degradations


def apply_haze(hq: np.ndarray, t_map: np.ndarray, airlight) -> DegradationSample:
    """Atmospheric scattering: lq = T * hq + (1 - T) * A, clamped to [0, 1]."""
    t = np.asarray(t_map, dtype=np.float64)
    if t.ndim == 2:
        t = t[..., None]
    if np.any(t <= 0.0) or np.any(t > 1.0):
        raise ValueError("transmission map must lie in (0, 1]; zero transmission is not invertible")
    a = np.asarray(airlight, dtype=np.float64).reshape(1, 1, -1)
    lq = np.clip(t * hq + (1.0 - t) * a, 0.0, 1.0)
    return DegradationSample(lq=lq, hq=hq, task="haze", truth={"t_map": t[..., 0], "airlight": a.reshape(-1)})


def haze_coefficients(t_map: np.ndarray, airlight) -> tuple:
    """Ground-truth (K, R) so that hq = K * lq + R + lq for an unclamped haze pair."""
    t = np.asarray(t_map, dtype=np.float64)
    if t.ndim == 2:
        t = t[..., None]
    a = np.asarray(airlight, dtype=np.float64).reshape(1, 1, -1)
    k = 1.0 / t - 1.0
    r = (1.0 - 1.0 / t) * a
    return k, np.broadcast_to(r, t.shape[:2] + (a.shape[-1],)).copy()


def _segment_mask(height: int, width: int, p0, p1, samples: int) -> np.ndarray:
    mask = np.zeros((height, width))
    ts = np.linspace(0.0, 1.0, samples)
    ys = p0[0] + ts * (p1[0] - p0[0])
    xs = p0[1] + ts * (p1[1] - p0[1])
    iy, ix = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = ys - iy, xs - ix
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (1, 0, fy * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 1, fy * fx)):
        yy, xx = iy + dy, ix + dx
        ok = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
        np.maximum.at(mask, (yy[ok], xx[ok]), wgt[ok])
    return mask


def _scaled_count(count: int, height: int, width: int) -> int:
    """Counts are given per 64x64 area so density is size independent."""
    if count <= 0:
        return 0
    return max(1, int(round(count * height * width / REFERENCE_AREA)))


def rain_layer(height: int, width: int, params: RainParams, rng: np.random.Generator) -> np.ndarray:
    layer = np.zeros((height, width))
    ang = np.deg2rad(params.angle_deg)
    direction = np.array([np.sin(ang), np.cos(ang)])  # (dy, dx); 90 deg is vertical
    for _ in range(_scaled_count(params.streak_count, height, width)):
        length = params.length_px * rng.uniform(0.7, 1.3)
        c = np.array([rng.uniform(0, height), rng.uniform(0, width)])
        p0, p1 = c - 0.5 * length * direction, c + 0.5 * length * direction
        seg = _segment_mask(height, width, p0, p1, samples=int(4 * length) + 2)
        layer = np.maximum(layer, seg * rng.uniform(0.6, 1.0))
    return params.intensity * layer


def apply_rain(hq: np.ndarray, params: RainParams, seed: int) -> DegradationSample:
    rng = np.random.default_rng(seed)
    layer = rain_layer(hq.shape[0], hq.shape[1], params, rng)[..., None]
    lq = np.clip(hq + layer, 0.0, 1.0)
    return DegradationSample(lq=lq, hq=hq, task="rain", truth={"additive": layer[..., 0]})


def _disk_alpha(height: int, width: int, cy: float, cx: float, r: float, softness: float) -> np.ndarray:
    d = np.sqrt((np.arange(height)[:, None] - cy) ** 2 + (np.arange(width)[None, :] - cx) ** 2)
    return np.clip((r - d) / max(softness, 1e-6) + 0.5, 0.0, 1.0)


def apply_snow(hq: np.ndarray, params: SnowParams, seed: int) -> DegradationSample:
    rng = np.random.default_rng(seed)
    h, w = hq.shape[:2]
    layer = np.zeros((h, w))
    for _ in range(_scaled_count(params.flake_count, h, w)):
        r = rng.uniform(params.radius_min, params.radius_max)
        alpha = _disk_alpha(h, w, rng.uniform(0, h), rng.uniform(0, w), r, softness=r)
        layer = np.maximum(layer, alpha)
    layer = params.opacity * layer
    lq = np.clip(hq + layer[..., None], 0.0, 1.0)
    return DegradationSample(lq=lq, hq=hq, task="snow", truth={"additive": layer})


def apply_raindrop(hq: np.ndarray, params: RaindropParams, seed: int) -> DegradationSample:
    """Blurred, darkened disks: an occlusion that is shape-similar to snow."""
    rng = np.random.default_rng(seed)
    h, w = hq.shape[:2]
    alpha = np.zeros((h, w))
    for _ in range(_scaled_count(params.drop_count, h, w)):
        r = rng.uniform(params.radius_min, params.radius_max)
        alpha = np.maximum(alpha, _disk_alpha(h, w, rng.uniform(0, h), rng.uniform(0, w), r, softness=1.5))
    if params.drop_count == 0:
        return DegradationSample(lq=hq.copy(), hq=hq, task="raindrop", truth={"alpha": alpha})
    blurred = ndimage.gaussian_filter(hq, sigma=(params.blur_radius, params.blur_radius, 0)) \
        if params.blur_radius > 0 else hq
    inside = blurred * (1.0 - params.darkening)
    a = alpha[..., None]
    lq = np.clip((1.0 - a) * hq + a * inside, 0.0, 1.0)
    return DegradationSample(lq=lq, hq=hq, task="raindrop", truth={"alpha": alpha})


def degrade(hq: np.ndarray, spec: DegradationSpec, seed: Optional[int] = None) -> DegradationSample:
    """Apply ``spec`` to ``hq``; per-sample randomness comes from ``seed``."""
    seed = spec.seed if seed is None else seed
    p = spec.params
    if spec.task == "haze":
        rng = np.random.default_rng(seed)
        field_ = _smooth_field(rng, hq.shape[0], hq.shape[1])
        t_map = p.t_min + (p.t_max - p.t_min) * field_
        return apply_haze(hq, t_map, p.airlight)
    if spec.task == "rain":
        return apply_rain(hq, p, seed)
    if spec.task == "snow":
        return apply_snow(hq, p, seed)
    return apply_raindrop(hq, p, seed)


def default_specs(seed: int = 0) -> dict:
    return {t: DegradationSpec(t, seed) for t in TASKS}


# ---------------------------------------------------------------------------
# on-disk dataset


def sample_seed(base_seed: int, task_index: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(task_index), int(index)]).generate_state(1)[0])


def save_png(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc


def _truth_summary(task: str, spec: DegradationSpec, sample: DegradationSample) -> dict:
    out = {"params": _params_dict(spec.params)}
    if task == "haze":
        t = sample.truth["t_map"]
        out["t_range"] = [round(float(t.min()), 6), round(float(t.max()), 6)]
        out["airlight"] = [float(a) for a in sample.truth["airlight"]]
    return out


def _params_dict(params) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(params).items()}


def build_dataset(root, per_task_count: int, size: int, seed: int = 0, specs: Optional[dict] = None,
                  tasks: Sequence[str] = TASKS) -> dict:
    """Write ``<root>/<task>/{lq,hq}/<index>.png`` and ``<root>/manifest.json``.

    Rebuilding with identical arguments reproduces the same bytes.
    """
    if per_task_count < 0:
        raise ConfigError(f"per_task_count must be >= 0, got {per_task_count}")
    root = Path(root)
    specs = specs or default_specs(seed)
    samples = []
    for ti, task in enumerate(tasks):
        spec = specs[task]
        for i in range(per_task_count):
            s = sample_seed(seed, ti, i)
            hq = gen_clean(s, size, size)
            deg = degrade(hq, spec, seed=s)
            lq_rel, hq_rel = f"{task}/lq/{i:05d}.png", f"{task}/hq/{i:05d}.png"
            save_png(root / lq_rel, deg.lq)
            save_png(root / hq_rel, deg.hq)
            samples.append({"task": task, "lq": lq_rel, "hq": hq_rel, "seed": s,
                            "truth": _truth_summary(task, spec, deg)})
    manifest = {"version": MANIFEST_VERSION, "tasks": list(tasks), "size": size,
                "per_task_count": per_task_count, "seed": seed, "samples": samples}
    path = root / "manifest.json"
    try:
        root.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc
    return manifest


def manifest_hash(root) -> str:
    path = Path(root) / "manifest.json"
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise ConfigError(f"unsupported manifest version {manifest.get('version')} in {path}")
    return manifest


@dataclass
class PairedDataset:
    """In-memory view of a manifest: stacked images plus task labels."""

    lq: np.ndarray
    hq: np.ndarray
    tasks: list
    task_names: list
    seeds: list
    root: Optional[str] = None

    def __len__(self) -> int:
        return len(self.tasks)

    def indices_for(self, task: str) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tasks) if t == task], dtype=np.intp)

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return PairedDataset(self.lq[idx], self.hq[idx], [self.tasks[i] for i in idx], self.task_names,
                             [self.seeds[i] for i in idx], self.root)


def load_dataset(root) -> PairedDataset:
    root = Path(root)
    manifest = load_manifest(root)
    samples = manifest["samples"]
    if not samples:
        raise ConfigError(f"dataset at {root} has no samples")
    lq = np.stack([load_png(root / s["lq"]) for s in samples])
    hq = np.stack([load_png(root / s["hq"]) for s in samples])
    return PairedDataset(lq, hq, [s["task"] for s in samples], list(manifest["tasks"]),
                         [s["seed"] for s in samples], str(root))


def residual_spectrum(samples: Sequence[DegradationSample]) -> np.ndarray:
    """Mean power spectrum of the luma residual lq - hq."""
    acc = None
    for s in samples:
        res = (s.lq - s.hq) @ np.array([0.299, 0.587, 0.114])
        p = np.abs(np.fft.fft2(res)) ** 2 / res.size
        acc = p if acc is None else acc + p
    return acc / len(samples)
