"""Evaluation reports and analysis exports (similarity, SVD energy,
attention maps, feature embeddings)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .autodiff import no_grad
from .backbone.model import RestorationModel
from .degradation import PairedDataset
from .metrics import psnr, ssim
from .prompting import PromptBank, materialize_prompt, similarity_matrix, svd_energy
from .training import predict

REPORT_VERSION = 1


class AnalysisError(ValueError):
    pass


@dataclass
class EvalReport:
    rows: list
    average: dict
    per_sample: list = field(default_factory=list)
    config_hash: str = ""
    checkpoint_hash: str = ""

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, "rows": self.rows, "average": self.average,
                "config_hash": self.config_hash, "checkpoint_hash": self.checkpoint_hash}


def score_pairs(pred: np.ndarray, target: np.ndarray, tasks: Sequence[str], indices=None) -> EvalReport:
    """Per-task and overall PSNR/SSIM for already-restored images."""
    if pred.shape != target.shape:
        raise AnalysisError(f"prediction stack {pred.shape} does not match targets {target.shape}")
    indices = list(range(len(pred))) if indices is None else list(indices)
    samples = []
    for i, (p, h, t) in enumerate(zip(pred, target, tasks)):
        samples.append({"index": int(indices[i]), "task": t, "psnr": psnr(p, h), "ssim": ssim(p, h)})
    rows = []
    for t in dict.fromkeys(tasks):
        sel = [s for s in samples if s["task"] == t]
        rows.append({"task": t, "count": len(sel), "psnr": float(np.mean([s["psnr"] for s in sel])),
                     "ssim": float(np.mean([s["ssim"] for s in sel]))})
    average = {"task": "average", "count": len(samples),
               "psnr": float(np.mean([s["psnr"] for s in samples])),
               "ssim": float(np.mean([s["ssim"] for s in samples]))}
    return EvalReport(rows, average, samples)


def evaluate(model: RestorationModel, data: PairedDataset, bank: Optional[PromptBank] = None,
             task: Optional[str] = None, config_hash: str = "", checkpoint_hash: str = "") -> EvalReport:
    """Full-image evaluation: no crop, no flip, outputs clamped to [0, 1]."""
    if task is not None:
        idx = data.indices_for(task)
        if len(idx) == 0:
            raise AnalysisError(f"task {task!r} is absent from the dataset (have {sorted(set(data.tasks))})")
    else:
        idx = np.arange(len(data))
    tasks = [data.tasks[i] for i in idx]
    pred = predict(model, data.lq[idx], tasks, bank)
    rep = score_pairs(pred, data.hq[idx], tasks, idx)
    rep.config_hash, rep.checkpoint_hash = config_hash, checkpoint_hash
    return rep


def write_report(report: EvalReport, out_dir) -> tuple:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rp = out / "report.json"
    rp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    sp = out / "per_sample.csv"
    with sp.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "task", "psnr", "ssim"])
        for s in report.per_sample:
            wr.writerow([s["index"], s["task"], repr(s["psnr"]), repr(s["ssim"])])
    return rp, sp


def read_per_sample(path) -> list:
    with Path(path).open(newline="") as fh:
        return [{"index": int(r["index"]), "task": r["task"], "psnr": float(r["psnr"]), "ssim": float(r["ssim"])}
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# prompt analyses


def write_matrix_csv(mat: np.ndarray, labels: Sequence[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([""] + list(labels))
        for lab, row in zip(labels, mat):
            wr.writerow([lab] + [repr(float(v)) for v in row])
    return path


def read_matrix_csv(path) -> tuple:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return labels, mat


def svd_rows(bank: PromptBank) -> list:
    """One row per (layer, slot, task, k) with the singular value and cumulative energy."""
    rows = []
    if bank.length == 0:
        return rows
    for layer in range(len(bank.layer_dims)):
        for slot in bank.slots:
            for task in bank.tasks:
                s, ratios = svd_energy(materialize_prompt(bank, task, layer, slot).data)
                for k, (sv, r) in enumerate(zip(s, ratios), start=1):
                    rows.append({"layer": layer, "slot": slot, "task": task, "k": k,
                                 "singular_value": float(sv), "cumulative_energy": float(r)})
    return rows


def write_svd_csv(bank: PromptBank, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=("layer", "slot", "task", "k", "singular_value", "cumulative_energy"),
                            lineterminator="\n")
        wr.writeheader()
        for r in svd_rows(bank):
            wr.writerow({**r, "singular_value": repr(r["singular_value"]),
                         "cumulative_energy": repr(r["cumulative_energy"])})
    return path


def export_similarity(bank: PromptBank, path, source: str = "heads") -> np.ndarray:
    sim = similarity_matrix(bank, source)
    write_matrix_csv(sim, bank.tasks, path)
    return sim


# ---------------------------------------------------------------------------
# attention maps


def attention_maps(model: RestorationModel, lq: np.ndarray, task: str, layer: int,
                   bank: Optional[PromptBank] = None) -> np.ndarray:
    """(heads, l, m + l) window-averaged attention probabilities of one image."""
    n_layers = len(model.attention_dims())
    if not 0 <= layer < n_layers:
        raise AnalysisError(f"attention layer {layer} out of range (model has {n_layers})")
    x = np.asarray(lq, dtype=np.float64)[None]
    with no_grad():
        prompts = bank.layer_prompts([task]) if bank is not None and bank.length else None
        model(x, prompts, record_layer=layer)
    probs = model.last_attention  # (nW, heads, l, n)
    return probs.mean(axis=0)


def export_attention(model: RestorationModel, lq: np.ndarray, task: str, layer: int, out_dir,
                     condition: str, bank: Optional[PromptBank] = None) -> list:
    """Write ``<out>/<condition>/attn/<layer>/<head>.png``; rows are queries, columns keys
    (prompt keys first). Each map is scaled by its own maximum."""
    maps = attention_maps(model, lq, task, layer, bank)
    d = Path(out_dir) / condition / "attn" / str(layer)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for h, m in enumerate(maps):
        peak = m.max()
        img = np.rint(255.0 * m / peak).astype(np.uint8) if peak > 0 else np.zeros(m.shape, np.uint8)
        p = d / f"{h}.png"
        Image.fromarray(img, mode="L").save(p, format="PNG")
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# embeddings


def embeddings(model: RestorationModel, data: PairedDataset, bank: Optional[PromptBank] = None,
               layer: str = "bottleneck", batch_size: int = 8) -> np.ndarray:
    """Mean-pooled intermediate features, one row per sample."""
    if layer != "bottleneck":
        raise AnalysisError(f"unknown embedding layer {layer!r}; only 'bottleneck' is exported")
    rows = []
    with no_grad():
        for s in range(0, len(data), batch_size):
            tasks = data.tasks[s:s + batch_size]
            feats: dict = {}
            prompts = bank.layer_prompts(tasks) if bank is not None and bank.length else None
            model(data.lq[s:s + batch_size], prompts, features=feats)
            rows.append(feats[layer].data.mean(axis=(1, 2)))
    return np.concatenate(rows, axis=0)


def export_embeddings(model: RestorationModel, data: PairedDataset, out_dir, bank: Optional[PromptBank] = None,
                      layer: str = "bottleneck") -> Path:
    emb = embeddings(model, data, bank, layer)
    path = Path(out_dir) / "embed" / f"{layer}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "task"] + [f"f{j}" for j in range(emb.shape[1])])
        for i, (t, row) in enumerate(zip(data.tasks, emb)):
            wr.writerow([i, t] + [repr(float(v)) for v in row])
    return path


def separation(emb: np.ndarray, labels: Sequence[str]) -> tuple:
    """Mean within-task and mean cross-task cosine similarity of embeddings."""
    e = np.asarray(emb, dtype=np.float64)
    unit = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    sim = unit @ unit.T
    lab = np.asarray(labels)
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(lab), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())
