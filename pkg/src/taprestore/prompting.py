"""Task-level soft prompts: the prompt bank, low-rank factorization and
key/value prompt injection into windowed attention."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .backbone.windows import window_attention
from .nn import Module, Parameter

DEFAULT_TASKS = ("rain", "snow", "haze", "raindrop")
ATTN_SLOTS = ("key", "value")
FULL_SLOTS = ("full",)


@dataclass(frozen=True)
class TaskId:
    index: int
    name: str


def task_ids(names: Sequence[str]) -> list:
    names = list(names)
    if not names:
        raise ValueError("at least one task is required")
    if len(set(names)) != len(names):
        raise ValueError(f"task names must be unique, got {names}")
    return [TaskId(i, n) for i, n in enumerate(names)]


@dataclass
class RelatednessGraph:
    """Positive-pair sets for the multi-positive contrastive loss."""

    tasks: tuple
    positives: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        pos = {t: set(self.positives.get(t, ())) for t in self.tasks}
        for t, others in pos.items():
            for p in others:
                if p not in pos:
                    raise ValueError(f"relatedness graph names unknown task {p!r}")
                if p == t:
                    raise ValueError(f"task {t!r} cannot be its own positive")
                if t not in pos[p]:
                    raise ValueError(f"relatedness graph is not symmetric: {t}->{p} without {p}->{t}")
        self.positives = pos

    @classmethod
    def from_pairs(cls, tasks: Sequence[str], pairs: Iterable[tuple]) -> "RelatednessGraph":
        adj: dict = {t: set() for t in tasks}
        for a, b in pairs:
            if a not in adj or b not in adj:
                raise ValueError(f"pair ({a}, {b}) names an unknown task")
            adj[a].add(b)
            adj[b].add(a)
        return cls(tuple(tasks), adj)

    @classmethod
    def from_adjacency(cls, tasks: Sequence[str], adjacency: Mapping[str, Sequence[str]]) -> "RelatednessGraph":
        extra = sorted(set(adjacency) - set(tasks))
        if extra:
            raise ValueError(f"relatedness graph names unknown task(s) {extra}")
        return cls(tuple(tasks), {k: set(v) for k, v in adjacency.items()})

    def positive_mask(self) -> np.ndarray:
        n = len(self.tasks)
        mask = np.zeros((n, n))
        for i, t in enumerate(self.tasks):
            for p in self.positives[t]:
                mask[i, self.tasks.index(p)] = 1.0
        return mask

    def to_adjacency(self) -> dict:
        return {t: sorted(self.positives[t]) for t in self.tasks}


def default_graph(tasks: Sequence[str] = DEFAULT_TASKS) -> RelatednessGraph:
    return RelatednessGraph.from_pairs(tasks, [("snow", "raindrop"), ("rain", "haze")])


class PromptBank(Module):
    """Per-layer, per-slot task prompts.

    With ``rank > 0`` every task owns a head of shape (length, rank) and each
    layer/slot owns one tail of shape (rank, dim) shared by all tasks; the
    prompt is head @ tail. With ``rank == 0`` each task stores a full
    (length, dim) prompt. ``strategy="full"`` keeps a single hidden-state slot
    instead of the key/value pair.
    """

    def __init__(self, layer_dims: Sequence[int], tasks: Sequence[str], length: int = 12, rank: int = 4,
                 strategy: str = "attn", seed: int = 0, init_std: float = 0.02, key_bias: float = 0.0):
        if length < 0 or rank < 0:
            raise ValueError(f"prompt length and rank must be >= 0, got length={length}, rank={rank}")
        if strategy not in ("attn", "full"):
            raise ValueError(f"unknown prompt strategy {strategy!r}")
        self._tasks = [t.name for t in task_ids(tasks)]
        self._layer_dims = [int(d) for d in layer_dims]
        self._length = int(length)
        self._rank = int(rank)
        self._strategy = strategy
        self._seed = int(seed)
        self._key_bias = float(key_bias)
        self._slots = ATTN_SLOTS if strategy == "attn" else FULL_SLOTS
        rng = np.random.default_rng(seed)
        n, m = len(self._tasks), self._length
        self.heads: list = []
        self.tails: list = []
        self.prompts: list = []
        if m == 0:
            return
        for d in self._layer_dims:
            if self._rank:
                self.heads.append({s: Parameter(rng.normal(0.0, init_std, (n, m, self._rank))) for s in self._slots})
                self.tails.append({s: Parameter(rng.normal(0.0, init_std, (self._rank, d))) for s in self._slots})
            else:
                self.prompts.append({s: Parameter(rng.normal(0.0, init_std, (n, m, d))) for s in self._slots})

    # -- descriptors ------------------------------------------------------------

    @property
    def tasks(self) -> list:
        return list(self._tasks)

    @property
    def length(self) -> int:
        return self._length

    @property
    def rank(self) -> int:
        return self._rank

    @property
    def strategy(self) -> str:
        return self._strategy

    @property
    def slots(self) -> tuple:
        return self._slots

    @property
    def layer_dims(self) -> list:
        return list(self._layer_dims)

    @property
    def key_bias(self) -> float:
        """Fixed attention-logit offset of the prompt key positions."""
        return self._key_bias

    @property
    def factorized(self) -> bool:
        return self._rank > 0

    def describe(self) -> dict:
        return {"tasks": self.tasks, "layer_dims": self.layer_dims, "length": self._length,
                "rank": self._rank, "strategy": self._strategy, "seed": self._seed, "key_bias": self._key_bias}

    def task_index(self, task) -> int:
        if isinstance(task, TaskId):
            task = task.name
        if isinstance(task, (int, np.integer)):
            if not 0 <= task < len(self._tasks):
                raise KeyError(f"unknown task index {task}")
            return int(task)
        try:
            return self._tasks.index(task)
        except ValueError:
            raise KeyError(f"unknown task {task!r}; registered: {self._tasks}") from None

    def _check(self, layer: int, slot: str) -> None:
        if not 0 <= layer < len(self._layer_dims):
            raise KeyError(f"prompt layer {layer} out of range (have {len(self._layer_dims)})")
        if slot not in self._slots:
            raise KeyError(f"prompt slot {slot!r} not in {self._slots}")

    # -- materialization ----------------------------------------------------------

    def materialize_all(self, layer: int, slot: str) -> Tensor:
        """(N, length, dim) prompts for every task at one layer/slot."""
        self._check(layer, slot)
        if self._length == 0:
            return Tensor(np.zeros((len(self._tasks), 0, self._layer_dims[layer])))
        if self._rank:
            return ops.matmul(self.heads[layer][slot], self.tails[layer][slot])
        return self.prompts[layer][slot]

    def task_heads(self, layer: int, slot: str) -> Tensor:
        """(N, length, rank) heads, or the full prompts when un-factorized."""
        self._check(layer, slot)
        if self._rank:
            return self.heads[layer][slot]
        return self.materialize_all(layer, slot)

    def layer_prompts(self, tasks: Sequence) -> list:
        """One ``{slot: (B, length, dim)}`` dict per prompted layer for a batch
        whose i-th sample belongs to ``tasks[i]``; a non-zero key bias rides
        along under ``"key_bias"``."""
        idx = np.array([self.task_index(t) for t in tasks], dtype=np.intp)
        out = []
        for layer in range(len(self._layer_dims)):
            d = {s: ops.index(self.materialize_all(layer, s), idx) for s in self._slots}
            if self._key_bias:
                d["key_bias"] = self._key_bias
            out.append(d)
        return out


def materialize_prompt(bank: PromptBank, task, layer: int, slot: str) -> Tensor:
    """The (length, dim) prompt of one task at one layer/slot."""
    i = bank.task_index(task)
    bank._check(layer, slot)
    if bank.length == 0:
        return Tensor(np.zeros((0, bank.layer_dims[layer])))
    if bank.factorized:
        return ops.matmul(ops.index(bank.heads[layer][slot], i), bank.tails[layer][slot])
    return ops.index(bank.prompts[layer][slot], i)


def prompt_param_formula(layer_dims: Sequence[int], n_tasks: int, length: int, rank: int,
                         slots: int = 2) -> int:
    """Closed-form trainable prompt count summed over prompted layers."""
    if length == 0:
        return 0
    if rank == 0:
        return sum(slots * n_tasks * length * d for d in layer_dims)
    return sum(slots * (n_tasks * length * rank + rank * d) for d in layer_dims)


# ---------------------------------------------------------------------------
# attention with prompts


def pad_bias(bias, m: int, fill: float = 0.0):
    """Prepend ``m`` columns of ``fill`` (prompt key positions) to a (..., l, l) bias."""
    if m < 0:
        raise ValueError(f"prompt length must be >= 0, got {m}")
    if bias is None or m == 0:
        return bias
    if isinstance(bias, Tensor):
        cols = Tensor(np.full(bias.shape[:-1] + (m,), float(fill)))
        return ops.concat([cols, bias], axis=-1)
    bias = np.asarray(bias, dtype=np.float64)
    return np.concatenate([np.full(bias.shape[:-1] + (m,), float(fill)), bias], axis=-1)


def prompted_attention(q: Tensor, k: Tensor, v: Tensor, bias=None, p_k=None, p_v=None, mask=None,
                       probs_out: list | None = None, key_bias: float = 0.0) -> Tensor:
    """softmax(q [P_k, k]^T / sqrt(d) + [c, bias]) [P_v, v] with c = ``key_bias``.

    ``p_k``/``p_v`` are (m, d) or batched (..., m, d) and are broadcast over the
    leading dims of ``k``. The output keeps the query length. A negative
    ``key_bias`` makes freshly initialised prompts nearly inert.
    """
    if p_k is None and p_v is None:
        return window_attention(q, k, v, bias, mask, probs_out)
    if p_k is None or p_v is None:
        raise ValueError("key and value prompts must be given together")
    if p_k.shape[-1] != k.shape[-1] or p_v.shape[-1] != v.shape[-1]:
        raise ValueError(f"prompt dim {p_k.shape[-1]}/{p_v.shape[-1]} does not match attention dim {k.shape[-1]}")
    m = p_k.shape[-2]
    if p_v.shape[-2] != m:
        raise ValueError(f"key prompt length {m} differs from value prompt length {p_v.shape[-2]}")
    if m == 0:
        return window_attention(q, k, v, bias, mask, probs_out)
    lead = k.shape[:-2]
    pk = ops.broadcast_to(p_k, lead + (m, k.shape[-1]))
    pv = ops.broadcast_to(p_v, lead + (m, v.shape[-1]))
    keys = ops.concat([pk, k], axis=-2)
    values = ops.concat([pv, v], axis=-2)
    if bias is None and key_bias:
        bias = np.zeros((q.shape[-2], k.shape[-2]))
    if bias is not None:
        bias = pad_bias(bias, m, key_bias)
    if mask is not None:
        mask = pad_bias(mask, m)
    return window_attention(q, keys, values, bias, mask, probs_out)


# ---------------------------------------------------------------------------
# analyses


def task_vectors(bank: PromptBank, source: str = "heads") -> list:
    """Flattened per-task prompt vectors, one (N, D) tensor per layer/slot.

    ``source="heads"`` uses the task-specific heads, ``"prompts"`` the
    materialized prompts.
    """
    if source not in ("heads", "prompts"):
        raise ValueError(f"unknown prompt source {source!r}")
    n = len(bank.tasks)
    out = []
    if bank.length == 0:
        return out
    for layer in range(len(bank.layer_dims)):
        for slot in bank.slots:
            mat = bank.task_heads(layer, slot) if source == "heads" else bank.materialize_all(layer, slot)
            out.append(ops.reshape(mat, (n, -1)))
    return out


def pairwise_cosine(x: Tensor, eps: float = 1e-24) -> Tensor:
    """(N, D) -> (N, N) cosine similarities."""
    norm = ops.sqrt(ops.add(ops.sum(ops.mul(x, x), axis=1, keepdims=True), eps))
    unit = ops.div(x, norm)
    return ops.matmul(unit, ops.swapaxes(unit, 0, 1))


def similarity_matrix(bank: PromptBank, source: str = "heads") -> np.ndarray:
    """Mean over layers/slots of the task-by-task cosine similarity."""
    n = len(bank.tasks)
    if n < 2:
        raise ValueError("similarity_matrix needs at least two tasks")
    vecs = task_vectors(bank, source)
    if not vecs:
        raise ValueError("prompt bank is empty (length 0)")
    acc = np.zeros((n, n))
    for v in vecs:
        acc += pairwise_cosine(v.detach()).data
    sim = acc / len(vecs)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def svd_energy(p) -> tuple:
    """Descending singular values and cumulative squared-energy ratios."""
    arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("svd_energy needs a finite matrix")
    s = np.linalg.svd(arr, compute_uv=False)
    energy = np.cumsum(s * s)
    total = energy[-1]
    ratios = energy / total if total > 0 else np.ones_like(energy)
    return s, ratios
