"""Training objectives: L1, perceptual, multi-positive contrastive, and the
two stage composites."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .nn import Conv2d, Module
from .prompting import PromptBank, RelatednessGraph, pairwise_cosine, task_vectors

# VGG16 feature index -> tap layer (1-based) of the substitute pyramid
DEFAULT_S = (3, 8, 15)
S_TO_TAP = {3: 3, 8: 5, 15: 6}

# offset so that the RMS distance is smooth at zero and still exactly zero there
_RMS_EPS = 1e-12


class LossConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_per: float = 0.1
    lambda_cont: float = 0.1
    tau: float = 0.5
    S: tuple = DEFAULT_S
    contrastive_source: str = "heads"

    def __post_init__(self):
        self.S = tuple(int(s) for s in self.S)
        if self.lambda_per < 0 or self.lambda_cont < 0:
            raise LossConfigError(f"loss weights must be >= 0, got lambda_per={self.lambda_per}, "
                                  f"lambda_cont={self.lambda_cont}")
        if not self.tau > 0:
            raise LossConfigError(f"tau must be positive, got {self.tau}")
        if self.contrastive_source not in ("heads", "prompts"):
            raise LossConfigError(f"contrastive_source must be 'heads' or 'prompts', got {self.contrastive_source!r}")


class FeatureExtractor(Module):
    """Frozen random conv pyramid standing in for a pretrained classifier.

    Six 3x3 conv + ReLU layers; layers 3 and 5 halve the resolution. Weights are
    drawn once from ``seed`` and never receive gradients.
    """

    CHANNELS = (8, 8, 16, 16, 24, 24)
    STRIDES = (1, 1, 2, 1, 2, 1)

    def __init__(self, seed: int = 1234, in_channels: int = 3):
        rng = np.random.default_rng(seed)
        self.seed = int(seed)
        self.layers = []
        c = in_channels
        for co, st in zip(self.CHANNELS, self.STRIDES):
            self.layers.append(Conv2d(c, co, 3, rng, stride=st))
            c = co
        self.requires_grad_(False)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def forward(self, x, taps: Sequence[int]) -> dict:
        """Return ``{tap: feature}`` for the requested 1-based layer indices."""
        taps = set(taps)
        bad = [t for t in taps if not 1 <= t <= self.n_layers]
        if bad:
            raise LossConfigError(f"feature taps {sorted(bad)} outside 1..{self.n_layers}")
        out = {}
        h = ops.as_tensor(x)
        for i, layer in enumerate(self.layers, start=1):
            h = ops.relu(layer(h))
            if i in taps:
                out[i] = h
            if len(out) == len(taps):
                break
        return out


def taps_for(S: Sequence[int]) -> list:
    missing = [s for s in S if s not in S_TO_TAP]
    if missing:
        raise LossConfigError(f"perceptual layer indices {missing} have no tap; known: {sorted(S_TO_TAP)}")
    return [S_TO_TAP[s] for s in S]


def _check_pair(pred: Tensor, target) -> Tensor:
    target = ops.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    return target


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference."""
    pred = ops.as_tensor(pred)
    target = _check_pair(pred, target)
    return ops.mean(ops.abs(ops.sub(pred, target)))


def rms_distance(a: Tensor, b) -> Tensor:
    """sqrt(mean((a-b)^2) + eps) - sqrt(eps): an L2 distance normalised by size."""
    d = ops.sub(a, b)
    return ops.sub(ops.sqrt(ops.add(ops.mean(ops.mul(d, d)), _RMS_EPS)), np.sqrt(_RMS_EPS))


def perceptual_loss(pred, target, extractor, S: Sequence[int] = DEFAULT_S) -> Tensor:
    """Sum over the tapped layers of the size-normalised L2 feature distance.

    ``extractor`` is called as ``extractor(x, taps)`` and must return a dict
    keyed by tap index.
    """
    pred = ops.as_tensor(pred)
    target = _check_pair(pred, target)
    taps = taps_for(S)
    fp = extractor(pred, taps)
    ft = extractor(Tensor(target.data), taps)
    missing = [t for t in taps if t not in fp or t not in ft]
    if missing:
        raise LossConfigError(f"extractor did not return taps {missing}")
    total = None
    for t in taps:
        term = rms_distance(fp[t], Tensor(ft[t].data))
        total = term if total is None else ops.add(total, term)
    return total


def _positive_lists(graph: RelatednessGraph) -> list:
    mask = graph.positive_mask()
    pos = [np.flatnonzero(mask[i]) for i in range(mask.shape[0])]
    for i, p in enumerate(pos):
        if len(p) == 0:
            raise LossConfigError(f"task {graph.tasks[i]!r} has an empty positive set")
    return pos


def contrastive_from_similarity(sim: Tensor, graph: RelatednessGraph, tau: float) -> Tensor:
    """Multi-positive contrastive loss for one (N, N) similarity matrix.

    L = sum_i -1/|P(i)| sum_{p in P(i)} log( exp(s_ip/tau) / sum_{k != i} exp(s_ik/tau) )
    """
    n = sim.shape[0]
    if n < 2:
        raise LossConfigError("contrastive loss needs at least two tasks")
    if tau <= 0:
        raise LossConfigError(f"tau must be positive, got {tau}")
    pos = _positive_lists(graph)
    rows = np.repeat(np.arange(n), n - 1).reshape(n, n - 1)
    cols = np.array([[k for k in range(n) if k != i] for i in range(n)], dtype=np.intp)
    logits = ops.mul(sim, 1.0 / tau)
    lse = ops.logsumexp(ops.index(logits, (rows, cols)), axis=-1)  # (N,)
    weights = np.zeros((n, n))
    for i, p in enumerate(pos):
        weights[i, p] = 1.0 / len(p)
    # sum_i [ lse_i - sum_p w_ip * logit_ip ]  (the positive weights sum to 1 per row)
    pos_term = ops.sum(ops.mul(logits, weights))
    return ops.sub(ops.sum(lse), pos_term)


def contrastive_loss(bank: PromptBank, graph: RelatednessGraph, tau: float = 0.5,
                     source: str = "heads") -> Tensor:
    """Average of :func:`contrastive_from_similarity` over prompted layers and slots."""
    if list(graph.tasks) != list(bank.tasks):
        raise LossConfigError(f"graph tasks {graph.tasks} differ from prompt bank tasks {bank.tasks}")
    vecs = task_vectors(bank, source)
    if not vecs:
        return Tensor(np.zeros(()))
    total = None
    for v in vecs:
        term = contrastive_from_similarity(pairwise_cosine(v), graph, tau)
        total = term if total is None else ops.add(total, term)
    return ops.mul(total, 1.0 / len(vecs))


def _task_groups(tasks: Sequence[str]) -> list:
    order = []
    for t in tasks:
        if t not in order:
            order.append(t)
    idx = np.asarray(tasks)
    return [(t, np.flatnonzero(idx == t)) for t in order]


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict = field(default_factory=dict)


def _per_task_l1(pred: Tensor, target: Tensor, tasks: Sequence[str]) -> list:
    out = []
    for t, idx in _task_groups(tasks):
        out.append((t, idx, l1_loss(ops.index(pred, idx), target.data[idx])))
    return out


def pretrain_loss(pred, target, tasks: Sequence[str], extractor: Optional[FeatureExtractor],
                  weights: LossWeights) -> LossBreakdown:
    """sum over tasks of [L1 + lambda_per * perceptual] on each task's samples."""
    pred = ops.as_tensor(pred)
    target = _check_pair(pred, target)
    if len(tasks) != pred.shape[0]:
        raise ValueError(f"got {len(tasks)} task labels for a batch of {pred.shape[0]}")
    use_per = weights.lambda_per > 0
    if use_per:
        if extractor is None:
            raise LossConfigError("lambda_per > 0 needs a feature extractor")
        # the extractor is per-sample, so one pass over the batch serves every task
        taps = taps_for(weights.S)
        fp = extractor(pred, taps)
        ft = extractor(Tensor(target.data), taps)
    total = None
    l1_sum = per_sum = 0.0
    for _, idx, l1 in _per_task_l1(pred, target, tasks):
        term = l1
        l1_sum += l1.item()
        if use_per:
            per = None
            for t in taps:
                d = rms_distance(ops.index(fp[t], idx), ft[t].data[idx])
                per = d if per is None else ops.add(per, d)
            per_sum += per.item()
            term = ops.add(term, ops.mul(per, weights.lambda_per))
        total = term if total is None else ops.add(total, term)
    return LossBreakdown(total, {"l1": l1_sum, "perceptual": per_sum})


def finetune_loss(pred, target, tasks: Sequence[str], bank: Optional[PromptBank],
                  graph: Optional[RelatednessGraph], weights: LossWeights) -> LossBreakdown:
    """sum over tasks of L1, plus lambda_cont times the prompt contrastive loss."""
    pred = ops.as_tensor(pred)
    target = _check_pair(pred, target)
    total = None
    l1_sum = 0.0
    for _, _, l1 in _per_task_l1(pred, target, tasks):
        l1_sum += l1.item()
        total = l1 if total is None else ops.add(total, l1)
    cont = 0.0
    if weights.lambda_cont > 0:
        if bank is None or graph is None:
            raise LossConfigError("lambda_cont > 0 needs a prompt bank and a relatedness graph")
        c = contrastive_loss(bank, graph, weights.tau, weights.contrastive_source)
        cont = c.item()
        total = ops.add(total, ops.mul(c, weights.lambda_cont))
    return LossBreakdown(total, {"l1": l1_sum, "contrastive": cont})
