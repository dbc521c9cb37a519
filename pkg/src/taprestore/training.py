"""Two-stage training: backbone pretraining, then frozen-backbone prompt tuning.

A joint mode trains backbone and prompts together in one stage for the
ablation that compares against the decoupled schedule.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import no_grad, ops
from .backbone.model import ModelConfig, RestorationModel
from .checkpoint import Checkpoint, save_checkpoint, state_hash
from .config import ConfigError, TrainConfig
from .degradation import PairedDataset
from .metrics import psnr
from .nn import param_count
from .objectives import FeatureExtractor, LossWeights, contrastive_loss, finetune_loss, pretrain_loss
from .prompting import PromptBank, RelatednessGraph, prompt_param_formula

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("step", "epoch", "stage", "lr", "loss", "l1", "perceptual", "contrastive", "grad_norm")


class TrainingAborted(RuntimeError):
    """Non-finite loss or parameters; carries enough context to replay the step."""

    def __init__(self, message: str, step: int, epoch: int, lr: float, batch_seed: list):
        super().__init__(f"{message} (step {step}, epoch {epoch}, lr {lr:.3e}, batch seed {batch_seed})")
        self.step, self.epoch, self.lr, self.batch_seed = step, epoch, lr, batch_seed


class BackboneModified(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data pipeline


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch), int(stream)])


def balanced_batches(labels: Sequence[str], batch_size: int, seed: int, epoch: int = 0,
                     tasks: Optional[Sequence[str]] = None) -> list:
    """Index arrays with exactly ``batch_size / N`` samples of every task.

    Pools are shuffled per (seed, epoch); the epoch ends when the smallest
    pool runs out.
    """
    labels = list(labels)
    tasks = list(tasks) if tasks is not None else list(dict.fromkeys(labels))
    n = len(tasks)
    if n == 0 or batch_size % n:
        raise ConfigError(f"batch_size {batch_size} is not divisible by the task count {n}")
    per = batch_size // n
    rng = _epoch_rng(seed, epoch, 0)
    arr = np.asarray(labels)
    pools = []
    for t in tasks:
        idx = np.flatnonzero(arr == t)
        pools.append(idx[rng.permutation(len(idx))])
    n_batches = min(len(p) for p in pools) // per if per else 0
    return [np.concatenate([p[b * per:(b + 1) * per] for p in pools]) for b in range(n_batches)]


def flip(img: np.ndarray, axis: int = 1) -> np.ndarray:
    """Mirror an (H, W, C) image; axis 1 is horizontal, 0 vertical."""
    return np.flip(img, axis=axis)


def augment(lq: np.ndarray, hq: np.ndarray, crop: int, flip_prob: float, rng: np.random.Generator):
    """Random aligned crop and flips applied identically to both images."""
    h, w = lq.shape[:2]
    if lq.shape != hq.shape:
        raise ValueError(f"pair shapes differ: {lq.shape} vs {hq.shape}")
    if crop > h or crop > w:
        raise ConfigError(f"crop {crop} exceeds image size {h}x{w}")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    lq, hq = lq[y:y + crop, x:x + crop], hq[y:y + crop, x:x + crop]
    if rng.random() < flip_prob:
        lq, hq = flip(lq, 1), flip(hq, 1)
    if rng.random() < flip_prob:
        lq, hq = flip(lq, 0), flip(hq, 0)
    return np.ascontiguousarray(lq), np.ascontiguousarray(hq)


# ---------------------------------------------------------------------------
# optimisation


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_init
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Adaptive moments with bias correction and decoupled weight decay."""

    def __init__(self, named_params: Sequence[tuple], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = OrderedDict(named_params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())
        self.v = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def hyper(self) -> dict:
        return {"name": "adam", "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "t": self.t}

    def state_tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for n in self.params:
            out[f"optim.m.{n}"] = self.m[n]
            out[f"optim.v.{n}"] = self.v[n]
        return out

    def load_state(self, tensors: dict, t: int) -> None:
        for n in self.params:
            km, kv = f"optim.m.{n}", f"optim.v.{n}"
            if km not in tensors or kv not in tensors:
                raise ConfigError(f"checkpoint lacks optimizer state for {n}")
            self.m[n] = np.array(tensors[km], dtype=np.float64)
            self.v[n] = np.array(tensors[kv], dtype=np.float64)
        self.t = int(t)


def clip_grad_norm(params: Sequence, max_norm: Optional[float]) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------------------
# prompt strategies


# logit offset of prompt key columns; keeps fresh prompts from diluting the
# pretrained attention (softmax weight of a zero key is not zero)
DEFAULT_KEY_BIAS = -4.0


@dataclass(frozen=True)
class PromptSetup:
    strategy: str
    length: int
    rank: int
    key_bias: float = DEFAULT_KEY_BIAS

    @property
    def bank_strategy(self) -> Optional[str]:
        if self.strategy == "none":
            return None
        return "full" if self.strategy == "p_full" else "attn"

    @property
    def joint(self) -> bool:
        return self.strategy == "p_attn_joint"

    @property
    def contrastive(self) -> bool:
        return self.strategy == "p_attn_enhanced"


def resolve_prompt(strategy: str, length: Optional[int] = None, rank: Optional[int] = None,
                   default_length: int = 12, enhanced_rank: int = 4,
                   key_bias: float = DEFAULT_KEY_BIAS) -> PromptSetup:
    """Only the enhanced arm factorises by default; the others keep full prompts."""
    from .config import STRATEGIES

    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if length is None:
        length = default_length
    if rank is None:
        rank = enhanced_rank if strategy == "p_attn_enhanced" else 0
    if length < 0 or rank < 0:
        raise ConfigError(f"prompt length and rank must be >= 0, got {length}, {rank}")
    return PromptSetup(strategy, int(length), int(rank), float(key_bias))


def build_bank(model: RestorationModel, tasks: Sequence[str], setup: PromptSetup, seed: int = 0,
               init_std: float = 0.02) -> Optional[PromptBank]:
    if setup.bank_strategy is None:
        return None
    return PromptBank(model.attention_dims(), tasks, length=setup.length, rank=setup.rank,
                      strategy=setup.bank_strategy, seed=seed, init_std=init_std, key_bias=setup.key_bias)


# ---------------------------------------------------------------------------
# inference


def predict(model: RestorationModel, lq: np.ndarray, tasks: Sequence[str], bank: Optional[PromptBank] = None,
            batch_size: int = 8, clamp: bool = True) -> np.ndarray:
    """Restore a stack of images without building a tape."""
    out = []
    with no_grad():
        for s in range(0, len(lq), batch_size):
            x = lq[s:s + batch_size]
            prompts = bank.layer_prompts(tasks[s:s + batch_size]) if bank is not None and bank.length else None
            out.append(model(x, prompts, clamp=clamp).data)
    return np.concatenate(out, axis=0)


def per_task_psnr(model, data: PairedDataset, bank=None, per_task: Optional[int] = None) -> dict:
    res = {}
    for t in data.task_names:
        idx = data.indices_for(t)
        if per_task:
            idx = idx[:per_task]
        if len(idx) == 0:
            continue
        pred = predict(model, data.lq[idx], [t] * len(idx), bank)
        res[t] = float(np.mean([psnr(p, h) for p, h in zip(pred, data.hq[idx])]))
    return res


# ---------------------------------------------------------------------------
# checkpoints


def backbone_hash(model: RestorationModel) -> str:
    return state_hash(model.state_dict())


def make_checkpoint(stage: str, model: RestorationModel, bank: Optional[PromptBank], optimizer: Optional[Adam],
                    epoch: int, step: int, tc: TrainConfig, setup: PromptSetup, extractor_seed: int,
                    extra: Optional[dict] = None) -> Checkpoint:
    tensors = OrderedDict((f"model.{k}", v) for k, v in model.state_dict().items())
    if bank is not None:
        tensors.update((f"bank.{k}", v) for k, v in bank.state_dict().items())
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    header = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "epoch": int(epoch),
        "step": int(step),
        "train": tc.to_dict(),
        "model_config": model.cfg.to_dict(),
        "prompt": {"strategy": setup.strategy, "length": setup.length, "rank": setup.rank},
        "bank": bank.describe() if bank is not None else None,
        "optimizer": optimizer.hyper() if optimizer is not None else None,
        "rng": {"seed": tc.seed, "scheme": "default_rng([seed, epoch, stream])", "next_epoch": int(epoch)},
        "extractor_seed": int(extractor_seed),
        "backbone_sha256": backbone_hash(model),
    }
    if extra:
        header.update(extra)
    return Checkpoint(header, tensors)


def restore(ckpt: Checkpoint) -> tuple:
    """Rebuild (model, bank) from a checkpoint."""
    h = ckpt.header
    if h.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"checkpoint version {h.get('version')} is not supported (expected {CHECKPOINT_VERSION})")
    mc = dict(h["model_config"])
    model = RestorationModel(ModelConfig(**mc))
    model.load_state_dict(ckpt.group("model"))
    bank = None
    if h.get("bank"):
        b = h["bank"]
        bank = PromptBank(b["layer_dims"], b["tasks"], length=b["length"], rank=b["rank"],
                          strategy=b["strategy"], seed=b["seed"], key_bias=b.get("key_bias", 0.0))
        bank.load_state_dict(ckpt.group("bank"))
    return model, bank


# ---------------------------------------------------------------------------
# the loop


@dataclass
class StageResult:
    checkpoint: Checkpoint
    losses: list = field(default_factory=list)
    epoch_means: list = field(default_factory=list)
    eval_rows: list = field(default_factory=list)


def _trainable(stage: str, model: RestorationModel, bank: Optional[PromptBank]) -> list:
    named = []
    if stage in ("pretrain", "joint"):
        model.requires_grad_(True)
        named += [(f"model.{n}", p) for n, p in model.named_parameters()]
    else:
        model.requires_grad_(False)
    if bank is not None:
        if stage in ("tune", "joint"):
            bank.requires_grad_(True)
            named += [(f"bank.{n}", p) for n, p in bank.named_parameters()]
        else:
            bank.requires_grad_(False)
    if stage == "tune" and not named:
        raise ConfigError("prompt tuning needs a non-empty prompt bank (strategy none or length 0?)")
    return named


def trainable_count(model: RestorationModel, bank: Optional[PromptBank]) -> int:
    return param_count(model, trainable_only=True) + (param_count(bank, trainable_only=True) if bank else 0)


def expected_prompt_count(bank: PromptBank) -> int:
    return prompt_param_formula(bank.layer_dims, len(bank.tasks), bank.length, bank.rank, len(bank.slots))


def _write_metrics(path: Path, rows: list, start_step: int) -> None:
    keep = []
    if start_step > 0 and path.exists():
        with path.open(newline="") as fh:
            keep = [r for r in csv.DictReader(fh) if int(r["step"]) < start_step]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in keep:
            wr.writerow(r)
        for r in rows:
            wr.writerow(r)


def train_stage(tc: TrainConfig, model: RestorationModel, bank: Optional[PromptBank], data: PairedDataset,
                weights: LossWeights, setup: PromptSetup, graph: Optional[RelatednessGraph] = None,
                extractor: Optional[FeatureExtractor] = None, run_dir=None, resume: Optional[Checkpoint] = None,
                eval_data: Optional[PairedDataset] = None, header_extra: Optional[dict] = None,
                on_epoch: Optional[Callable] = None) -> StageResult:
    """Run one stage (``tc.stage``) and return its final checkpoint.

    With ``resume`` the model, bank and optimizer state come from that
    checkpoint and training continues at its recorded epoch.
    """
    stage = tc.stage
    named = _trainable(stage, model, bank)
    params = [p for _, p in named]
    opt = Adam(named, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay)
    start_epoch = 0
    if resume is not None:
        if resume.header.get("stage") != stage:
            raise ConfigError(f"cannot resume a {stage} run from a {resume.header.get('stage')} checkpoint")
        model.load_state_dict(resume.group("model"))
        if bank is not None:
            bank.load_state_dict(resume.group("bank"))
        opt.load_state(resume.tensors, resume.header["optimizer"]["t"])
        start_epoch = int(resume.header["epoch"])
    extractor_seed = extractor.seed if extractor is not None else -1
    if extractor is None and stage in ("pretrain", "joint") and weights.lambda_per > 0:
        raise ConfigError("pretraining with lambda_per > 0 needs a feature extractor")

    steps_per_epoch = len(balanced_batches(data.tasks, tc.batch_size, tc.seed, 0, tc.tasks))
    if steps_per_epoch == 0:
        raise ConfigError(f"dataset too small for batch_size {tc.batch_size}: no full balanced batch")
    total = steps_per_epoch * tc.epochs
    frozen_hash = backbone_hash(model) if stage == "tune" else None
    run_dir = Path(run_dir) if run_dir is not None else None
    rows, losses, epoch_means, eval_rows = [], [], [], []
    step = start_epoch * steps_per_epoch

    for epoch in range(start_epoch, tc.epochs):
        batches = balanced_batches(data.tasks, tc.batch_size, tc.seed, epoch, tc.tasks)
        aug_rng = _epoch_rng(tc.seed, epoch, 1)
        epoch_losses = []
        for bi, idx in enumerate(batches):
            pairs = [augment(data.lq[i], data.hq[i], tc.crop_size, tc.flip_prob, aug_rng) for i in idx]
            lq = np.stack([p[0] for p in pairs])
            hq = np.stack([p[1] for p in pairs])
            tasks = [data.tasks[i] for i in idx]
            lr = cosine_lr(step, max(total - 1, 0), tc.lr_init, tc.lr_min)

            prompts = bank.layer_prompts(tasks) if bank is not None and bank.length else None
            pred = model(lq, prompts)
            if stage == "tune":
                br = finetune_loss(pred, hq, tasks, bank, graph, weights)
            else:
                br = pretrain_loss(pred, hq, tasks, extractor, weights)
                if stage == "joint" and weights.lambda_cont > 0 and bank is not None:
                    c = contrastive_loss(bank, graph, weights.tau, weights.contrastive_source)
                    br.terms["contrastive"] = c.item()
                    br.total = ops.add(br.total, ops.mul(c, weights.lambda_cont))
            loss_val = br.total.item()
            if not math.isfinite(loss_val):
                raise TrainingAborted("non-finite loss", step, epoch, lr, [tc.seed, epoch, bi])
            opt.zero_grad()
            br.total.backward()
            gnorm = clip_grad_norm(params, tc.grad_clip)
            if not math.isfinite(gnorm):
                raise TrainingAborted("non-finite gradient", step, epoch, lr, [tc.seed, epoch, bi])
            opt.step(lr)
            rows.append({"step": step, "epoch": epoch, "stage": stage, "lr": repr(lr), "loss": repr(loss_val),
                         "l1": repr(br.terms.get("l1", 0.0)), "perceptual": repr(br.terms.get("perceptual", 0.0)),
                         "contrastive": repr(br.terms.get("contrastive", 0.0)), "grad_norm": repr(gnorm)})
            losses.append(loss_val)
            epoch_losses.append(loss_val)
            step += 1
        opt.zero_grad()
        if not all(np.all(np.isfinite(p.data)) for p in params):
            raise TrainingAborted("non-finite parameters", step, epoch, lr, [tc.seed, epoch, -1])
        if frozen_hash is not None and backbone_hash(model) != frozen_hash:
            raise BackboneModified(f"backbone changed during prompt tuning at epoch {epoch}")
        epoch_means.append(float(np.mean(epoch_losses)))
        if eval_data is not None and tc.eval_per_task:
            scores = per_task_psnr(model, eval_data, bank, tc.eval_per_task)
            for t, v in scores.items():
                eval_rows.append({"epoch": epoch, "task": t, "psnr": repr(v)})
        log.info("%s epoch %d/%d mean loss %.5f", stage, epoch + 1, tc.epochs, epoch_means[-1])
        if run_dir is not None and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            ck = make_checkpoint(stage, model, bank, opt, epoch + 1, step, tc, setup, extractor_seed, header_extra)
            save_checkpoint(ck, run_dir / f"{stage}_epoch{epoch + 1:04d}.ckpt")
        if on_epoch is not None:
            on_epoch(epoch, epoch_means[-1])

    if run_dir is not None:
        _write_metrics(run_dir / "metrics.csv", rows, start_epoch * steps_per_epoch)
        if eval_rows:
            with (run_dir / "eval.csv").open("w", newline="") as fh:
                wr = csv.DictWriter(fh, fieldnames=("epoch", "task", "psnr"), lineterminator="\n")
                wr.writeheader()
                wr.writerows(eval_rows)
    ck = make_checkpoint(stage, model, bank, opt, tc.epochs, step, tc, setup, extractor_seed, header_extra)
    return StageResult(ck, losses, epoch_means, eval_rows)


def pretrain(tc: TrainConfig, model: RestorationModel, data: PairedDataset, weights: LossWeights,
             extractor: Optional[FeatureExtractor], run_dir=None, resume: Optional[Checkpoint] = None,
             setup: Optional[PromptSetup] = None, **kw) -> StageResult:
    """Stage one: supervised backbone training with L1 + perceptual loss."""
    if tc.stage != "pretrain":
        raise ConfigError(f"pretrain() got a {tc.stage} config")
    setup = setup or PromptSetup("none", 0, 0)
    return train_stage(tc, model, None, data, weights, setup, None, extractor, run_dir, resume, **kw)


def prompt_tune(tc: TrainConfig, pretrained: Checkpoint, data: PairedDataset, graph: RelatednessGraph,
                weights: LossWeights, setup: PromptSetup, prompt_seed: int = 0, init_std: float = 0.02,
                run_dir=None, resume: Optional[Checkpoint] = None, **kw) -> StageResult:
    """Stage two: freeze the pretrained backbone and learn task prompts."""
    if tc.stage != "tune":
        raise ConfigError(f"prompt_tune() got a {tc.stage} config")
    if pretrained.header.get("stage") != "pretrain":
        raise ConfigError(f"prompt tuning needs a pretrain checkpoint, got stage {pretrained.header.get('stage')!r}")
    model, _ = restore(pretrained)
    bank = build_bank(model, tc.tasks, setup, prompt_seed, init_std)
    if bank is None or bank.length == 0:
        raise ConfigError(f"strategy {setup.strategy!r} with length {setup.length} has no prompts to tune")
    extra = {"parent_backbone_sha256": pretrained.header.get("backbone_sha256")}
    res = train_stage(tc, model, bank, data, weights, setup, graph, None, run_dir, resume, header_extra=extra, **kw)
    res.checkpoint.header["extractor_seed"] = pretrained.header.get("extractor_seed", -1)
    return res


def joint_train(tc: TrainConfig, model: RestorationModel, data: PairedDataset, weights: LossWeights,
                extractor: Optional[FeatureExtractor], setup: PromptSetup, graph: Optional[RelatednessGraph] = None,
                prompt_seed: int = 0, init_std: float = 0.02, run_dir=None, resume: Optional[Checkpoint] = None,
                **kw) -> StageResult:
    """Single stage: backbone and prompts optimised together from scratch."""
    if tc.stage != "joint":
        raise ConfigError(f"joint_train() got a {tc.stage} config")
    bank = build_bank(model, tc.tasks, setup, prompt_seed, init_std)
    return train_stage(tc, model, bank, data, weights, setup, graph, extractor, run_dir, resume, **kw)
