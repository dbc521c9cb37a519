"""Five-stage windowed-attention U-Net with a soft-reconstruction head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from ..autodiff import Tensor, ops
from ..nn import Conv2d, Linear, Module, Parameter, trunc_normal
from .. import prompting
from .windows import relative_position_index, shift_mask, window_attention, window_partition, window_reverse

NORM_EPS = 1e-6
N_STAGES = 5
DECODER_STAGES = (3, 4)


@dataclass
class ModelConfig:
    embed_dims: tuple = (16, 32, 64, 32, 16)
    depths: tuple = (2, 2, 2, 1, 1)
    num_heads: tuple = (2, 4, 8, 4, 2)
    window_size: int = 8
    mlp_ratio: float = 2.0
    use_shifted_windows: bool = True
    # stage indices (0-based; decoder stages are 3 and 4) that keep attention
    decoder_attention_stages: tuple = (3,)
    sk_reduction: int = 8
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        self.embed_dims = tuple(int(d) for d in self.embed_dims)
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        self.decoder_attention_stages = tuple(int(s) for s in self.decoder_attention_stages)
        self.validate()

    def validate(self) -> None:
        for name in ("embed_dims", "depths", "num_heads"):
            if len(getattr(self, name)) != N_STAGES:
                raise ValueError(f"{name} must list {N_STAGES} stages, got {getattr(self, name)}")
        for d, h in zip(self.embed_dims, self.num_heads):
            if h < 1 or d % h:
                raise ValueError(f"embed dim {d} is not divisible by {h} heads")
        if any(d < 1 for d in self.depths):
            raise ValueError(f"every stage needs at least one block, got depths {self.depths}")
        if self.embed_dims[3] != self.embed_dims[1] or self.embed_dims[4] != self.embed_dims[0]:
            raise ValueError("decoder widths must mirror the encoder (dims[3]==dims[1], dims[4]==dims[0])")
        if self.window_size < 1:
            raise ValueError(f"window_size must be positive, got {self.window_size}")
        if self.mlp_ratio <= 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        bad = [s for s in self.decoder_attention_stages if s not in DECODER_STAGES]
        if bad:
            raise ValueError(f"decoder_attention_stages must be a subset of {DECODER_STAGES}, got {bad}")

    def stage_has_attention(self, stage: int) -> bool:
        return stage < 3 or stage in self.decoder_attention_stages

    def check_input(self, h: int, w: int) -> None:
        """Every stage resolution must tile by the window."""
        for level, scale in enumerate((1, 2, 4)):
            if h % scale or w % scale or (h // scale) % self.window_size or (w // scale) % self.window_size:
                raise ValueError(
                    f"input {h}x{w} is incompatible: stage resolution {h // scale}x{w // scale} "
                    f"(level {level}) must be divisible by window size {self.window_size}; "
                    f"use multiples of {4 * self.window_size}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class RelPosBias(Module):
    """Learnable table of per-head scalars gathered into an (heads, l, l) bias."""

    def __init__(self, window: int, heads: int, rng: np.random.Generator):
        self.table = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
        self._window = window
        self._heads = heads

    def forward(self) -> Tensor:
        idx = relative_position_index(self._window)
        l = idx.shape[0]
        b = ops.index(self.table, idx.reshape(-1))  # (l*l, heads)
        b = ops.reshape(b, (l, l, self._heads))
        return ops.transpose(b, (2, 0, 1))


class RescaleNorm(Module):
    """Per-token standardization that hands back the removed statistics.

    :meth:`normalize` returns ``(n, scale, shift)`` where ``n`` is the
    standardized token and ``scale``/``shift`` are learned per-channel affine
    maps of the token std/mean. Calling the module returns
    ``n * scale + shift``, which equals the input at init.
    """

    def __init__(self, dim: int):
        self.scale_w = Parameter(np.ones(dim))
        self.scale_b = Parameter(np.zeros(dim))
        self.shift_w = Parameter(np.ones(dim))
        self.shift_b = Parameter(np.zeros(dim))

    def normalize(self, x: Tensor):
        mu = ops.mean(x, axis=-1, keepdims=True)
        std = ops.sqrt(ops.add(ops.var(x, axis=-1, keepdims=True), NORM_EPS))
        n = ops.div(ops.sub(x, mu), std)
        scale = ops.add(ops.mul(std, self.scale_w), self.scale_b)
        shift = ops.add(ops.mul(mu, self.shift_w), self.shift_b)
        return n, scale, shift

    def forward(self, x: Tensor) -> Tensor:
        n, scale, shift = self.normalize(x)
        return ops.add(ops.mul(n, scale), shift)


class Mlp(Module):
    def __init__(self, dim: int, ratio: float, rng: np.random.Generator):
        hidden = max(1, int(round(dim * ratio)))
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class WindowAttention(Module):
    """Multi-head self-attention inside (optionally shifted) windows."""

    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator):
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.rel_bias = RelPosBias(window, heads, rng)
        self._dim = dim
        self._heads = heads
        self._window = window

    def _split_heads(self, t: Tensor, bn: int, n: int) -> Tensor:
        # (bn, n, C) -> (bn, heads, n, hd)
        hd = self._dim // self._heads
        return ops.transpose(ops.reshape(t, (bn, n, self._heads, hd)), (0, 2, 1, 3))

    def _prompt_heads(self, p: Tensor, batch: int, n_win: int) -> Tensor:
        # (B, m, C) -> (B*nW, heads, m, hd), identical for every window of an image
        m = p.shape[1]
        hd = self._dim // self._heads
        p = ops.transpose(ops.reshape(p, (batch, 1, m, self._heads, hd)), (0, 1, 3, 2, 4))
        p = ops.broadcast_to(p, (batch, n_win, self._heads, m, hd))
        return ops.reshape(p, (batch * n_win, self._heads, m, hd))

    def forward(self, x: Tensor, shift: int = 0, prompt: dict | None = None, probs_out: list | None = None) -> Tensor:
        b, h, w, c = x.shape
        win = self._window
        n_win = (h // win) * (w // win)
        if shift:
            x = ops.roll(x, (-shift, -shift), (1, 2))
        tokens = window_partition(x, win)  # (b*nW, l, C)
        bn, l, _ = tokens.shape
        bias = self.rel_bias()  # (heads, l, l)
        mask = None
        if shift:
            mask = _batch_mask(b, h, w, win, shift)

        key_bias = float(prompt.get("key_bias", 0.0)) if prompt else 0.0
        full = prompt.get("full") if prompt else None
        m_full = full.shape[1] if full is not None else 0
        if m_full:
            # hidden-state prompting: prompts join the token sequence, output is trimmed
            pf = ops.reshape(ops.broadcast_to(ops.reshape(full, (b, 1, m_full, c)), (b, n_win, m_full, c)),
                             (bn, m_full, c))
            tokens = ops.concat([pf, tokens], axis=1)
            bias = _pad_square(bias, m_full, key_bias)
            if mask is not None:
                mask = _pad_square(mask, m_full)
        n = tokens.shape[1]
        qkv = self.qkv(tokens)
        q, k, v = ops.split(qkv, 3, axis=-1)
        q, k, v = (self._split_heads(t, bn, n) for t in (q, k, v))

        if prompt and "key" in prompt:
            pk = self._prompt_heads(prompt["key"], b, n_win)
            pv = self._prompt_heads(prompt["value"], b, n_win)
            out = prompting.prompted_attention(q, k, v, bias, pk, pv, mask, probs_out, key_bias)
        else:
            out = window_attention(q, k, v, bias, mask, probs_out)
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (bn, n, c))
        if m_full:
            out = ops.index(out, (slice(None), slice(m_full, None)))
        out = self.proj(out)
        y = window_reverse(out, win, h, w)
        if shift:
            y = ops.roll(y, (shift, shift), (1, 2))
        return y


@lru_cache(maxsize=32)
def _batch_mask(b: int, h: int, w: int, win: int, shift: int) -> np.ndarray:
    # (b*nW, 1, l, l): the per-window shift mask repeated for every image
    base = shift_mask(h, w, win, shift)
    n_win, l = base.shape[0], base.shape[1]
    mask = np.ascontiguousarray(np.broadcast_to(base[None, :, None], (b, n_win, 1, l, l)).reshape(b * n_win, 1, l, l))
    mask.setflags(write=False)
    return mask


def _pad_square(bias, m: int, fill: float = 0.0):
    """Rows of zeros and columns of ``fill`` for ``m`` leading prompt tokens."""
    cols = prompting.pad_bias(bias, m, fill)
    if isinstance(cols, Tensor):
        zeros = Tensor(np.zeros(cols.shape[:-2] + (m, cols.shape[-1])))
        return ops.concat([zeros, cols], axis=-2)
    return np.concatenate([np.zeros(cols.shape[:-2] + (m, cols.shape[-1])), cols], axis=-2)


class TransformerBlock(Module):
    """Rescale-normalized attention and MLP sublayers.

    Each sublayer runs as ``(n + f(n)) * scale + shift`` on the normalized token
    ``n``, so the block is the identity when ``f`` vanishes.
    """

    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: float, shift: int, attention: bool,
                 rng: np.random.Generator):
        self.norm1 = RescaleNorm(dim) if attention else None
        self.attn = WindowAttention(dim, heads, window, rng) if attention else None
        self.norm2 = RescaleNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, rng)
        self._shift = shift
        self._dim = dim

    @property
    def has_attention(self) -> bool:
        return self.attn is not None

    def forward(self, x: Tensor, prompt: dict | None = None, probs_out: list | None = None) -> Tensor:
        if self.attn is not None:
            h, w = x.shape[1], x.shape[2]
            win = self.attn._window
            shift = self._shift if min(h, w) > win else 0
            n, scale, shift_t = self.norm1.normalize(x)
            y = self.attn(n, shift=shift, prompt=prompt, probs_out=probs_out)
            x = ops.add(ops.mul(ops.add(n, y), scale), shift_t)
        n, scale, shift_t = self.norm2.normalize(x)
        x = ops.add(ops.mul(ops.add(n, self.mlp(n)), scale), shift_t)
        return x


class SKFusion(Module):
    """Per-channel soft selection between a skip feature and an upsampled one."""

    def __init__(self, dim: int, rng: np.random.Generator, reduction: int = 8):
        hidden = max(dim // reduction, 4)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, 2 * dim, rng)
        self._dim = dim

    def branch_weights(self, skip: Tensor, up: Tensor) -> Tensor:
        """(B, 2, C) softmax weights; row 0 is the skip branch."""
        if skip.shape != up.shape:
            raise ValueError(f"sk_fuse needs matching shapes, got {skip.shape} and {up.shape}")
        pooled = ops.mean(ops.add(skip, up), axis=(1, 2))  # (B, C)
        logits = self.fc2(ops.gelu(self.fc1(pooled)))
        logits = ops.reshape(logits, (skip.shape[0], 2, self._dim))
        return ops.softmax(logits, axis=1)

    def forward(self, skip: Tensor, up: Tensor) -> Tensor:
        wts = self.branch_weights(skip, up)
        b, c = skip.shape[0], self._dim
        w_skip = ops.reshape(ops.index(wts, (slice(None), 0)), (b, 1, 1, c))
        w_up = ops.reshape(ops.index(wts, (slice(None), 1)), (b, 1, 1, c))
        return ops.add(ops.mul(skip, w_skip), ops.mul(up, w_up))


def sk_fuse(module: SKFusion, skip: Tensor, up: Tensor) -> Tensor:
    return module(skip, up)


def rescale_norm(module: RescaleNorm, x: Tensor) -> Tensor:
    return module(x)


def soft_reconstruct(o: Tensor, x_lq: Tensor, clamp: bool = False) -> Tensor:
    """K * X_lq + R + X_lq with K = O[..., :1] (broadcast over RGB), R = O[..., 1:4]."""
    o, x_lq = ops.as_tensor(o), ops.as_tensor(x_lq)
    if o.shape[-1] != 4:
        raise ValueError(f"reconstruction map needs 4 channels, got {o.shape[-1]}")
    if o.shape[:-1] != x_lq.shape[:-1] or x_lq.shape[-1] != 3:
        raise ValueError(f"reconstruction map {o.shape} does not match image {x_lq.shape}")
    k, r = ops.split(o, [1, 3], axis=-1)
    out = ops.add(ops.add(ops.mul(k, x_lq), r), x_lq)
    return ops.clamp(out, 0.0, 1.0) if clamp else out


class RestorationModel(Module):
    """Conv embed, two encoder stages, bottleneck, two decoder stages with
    SK-fused skips, and a 4-channel head feeding :func:`soft_reconstruct`."""

    def __init__(self, config: ModelConfig | None = None):
        cfg = config or ModelConfig()
        self._cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.embed_dims
        win = cfg.window_size
        self.embed = Conv2d(cfg.in_channels, d[0], 3, rng)
        self.stages = []
        for s in range(N_STAGES):
            blocks = []
            for i in range(cfg.depths[s]):
                shift = win // 2 if (cfg.use_shifted_windows and i % 2 == 1) else 0
                blocks.append(TransformerBlock(d[s], cfg.num_heads[s], win, cfg.mlp_ratio, shift,
                                               cfg.stage_has_attention(s), rng))
            self.stages.append(blocks)
        self.down1 = Linear(4 * d[0], d[1], rng)
        self.down2 = Linear(4 * d[1], d[2], rng)
        self.up1 = Linear(d[2], 4 * d[3], rng)
        self.up2 = Linear(d[3], 4 * d[4], rng)
        self.fuse1 = SKFusion(d[3], rng, cfg.sk_reduction)
        self.fuse2 = SKFusion(d[4], rng, cfg.sk_reduction)
        self.head = Conv2d(d[4], 4, 3, rng, std=1e-2)

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    def blocks(self) -> list:
        return [blk for stage in self.stages for blk in stage]

    def attention_dims(self) -> list:
        """Embedding width of each attention layer, in forward order."""
        return [blk._dim for blk in self.blocks() if blk.has_attention]

    def forward(self, x_lq, prompts: list | None = None, record_layer: int | None = None,
                features: dict | None = None, clamp: bool = False) -> Tensor:
        """Restore a (B, H, W, 3) batch.

        ``prompts`` is the per-attention-layer list from
        :meth:`PromptBank.layer_prompts`. ``record_layer`` selects an attention
        layer whose probabilities are stored in ``self.last_attention``; the
        bottleneck output is written to ``features["bottleneck"]`` when a dict is
        passed.
        """
        x_lq = ops.as_tensor(x_lq)
        if x_lq.ndim != 4 or x_lq.shape[-1] != self._cfg.in_channels:
            raise ValueError(f"expected (B, H, W, {self._cfg.in_channels}) input, got {x_lq.shape}")
        self._cfg.check_input(x_lq.shape[1], x_lq.shape[2])
        n_attn = len(self.attention_dims())
        if prompts is not None and len(prompts) != n_attn:
            raise ValueError(f"got prompts for {len(prompts)} layers, model has {n_attn} attention layers")
        self.last_attention = None
        counter = [0]

        def run_stage(x, stage):
            for blk in self.stages[stage]:
                if blk.has_attention:
                    li = counter[0]
                    counter[0] += 1
                    probs = [] if record_layer == li else None
                    x = blk(x, prompt=prompts[li] if prompts is not None else None, probs_out=probs)
                    if probs:
                        self.last_attention = probs[0]
                else:
                    x = blk(x)
            return x

        x = self.embed(x_lq)
        s1 = run_stage(x, 0)
        x = self.down1(ops.pixel_unshuffle(s1, 2))
        s2 = run_stage(x, 1)
        x = self.down2(ops.pixel_unshuffle(s2, 2))
        x = run_stage(x, 2)
        if features is not None:
            features["bottleneck"] = x
        x = ops.pixel_shuffle(self.up1(x), 2)
        x = run_stage(self.fuse1(s2, x), 3)
        x = ops.pixel_shuffle(self.up2(x), 2)
        x = run_stage(self.fuse2(s1, x), 4)
        o = self.head(x)
        return soft_reconstruct(o, x_lq, clamp=clamp)


def forward(model: RestorationModel, x_lq, prompts: list | None = None) -> Tensor:
    return model(x_lq, prompts)


def param_count(module: Module, trainable_only: bool = False) -> int:
    return int(sum(p.size for p in module.parameters() if p.requires_grad or not trainable_only))
