"""V1 stem -> V2 integration -> V3 windowed-attention context with memory.

The stem is two weight-standardized stride-2 3x3 convolutions with a SELU
between them (1/4 resolution, 64 channels). V2 enlarges the receptive
field with a depthwise-separable 5x5 convolution and full-grid 4-head
self-attention under learned relative-position biases; its output
normalization gain is scaled by exp(-mean cue log-variance), clipped to a
configurable band so synthetic near-zero variances cannot blow up the
forward pass. V3 runs window-7 attention blocks (second block shifted by
window//2 with the usual cyclic-shift region mask); after each block the
tokens read from and write to the key-value memory bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from . import memory as M
from .engine import ShapeError, Tensor


@dataclass
class StackConfig:
    in_channels: int = 8
    stem_channels: int = 64
    v2_kernel: int = 5
    v2_heads: int = 4
    v2_iterations: int = 1
    v3_blocks: int = 2
    window: int = 7
    memory_slots: int = 32
    memory_dim: int = 128
    memory_top_k: int = 8
    mlp_ratio: int = 2
    max_rel_grid: int = 16
    sigma_gain_clip: float = 2.0

    def __post_init__(self):
        if self.stem_channels % self.v2_heads != 0:
            raise ValueError("channel count must be divisible by attention heads")


@dataclass
class RunFlags:
    """Inference/training-time switches used by the ablation harness."""
    memory_enabled: bool = True
    freeze_eta: bool = False
    slot_shuffle_fraction: float = 0.0
    slot_shuffle_seed: int = 0


def standardize_kernel(w: Tensor) -> Tensor:
    """Zero-mean, unit-variance kernel per output filter (eps keeps var exact
    to ~1e-9 for any realistically scaled kernel)."""
    axes = tuple(range(w.data.ndim - 1))
    mu = E.mean_(w, axis=axes, keepdims=True)
    centred = E.sub(w, mu)
    var = E.mean_(E.square(centred), axis=axes, keepdims=True)
    return E.div(centred, E.sqrt(E.add(var, 1e-10)))


def swap_last(t: Tensor) -> Tensor:
    nd = t.data.ndim
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    return E.transpose(t, axes)


def gelu(x: Tensor) -> Tensor:
    # sigmoid approximation keeps the primitive set small
    return E.mul(x, E.sigmoid(E.mul(x, 1.702)))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         bias: Tensor | None = None,
                         mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q kT / sqrt(d)) v with optional additive bias/mask on the logits."""
    d = q.data.shape[-1]
    logits = E.mul(E.matmul(q, swap_last(k)), 1.0 / float(np.sqrt(d)))
    if bias is not None:
        logits = E.add(logits, bias)
    if mask is not None:
        logits = E.add(logits, E.Tensor(mask, dtype=q.dtype))
    attn = E.softmax(logits, axis=-1)
    return E.matmul(attn, v), attn


_rel_index_cache: dict[tuple, np.ndarray] = {}


def relative_index(grid_h: int, grid_w: int, reach: int) -> np.ndarray:
    """(N, N) lookup indices into a (2*reach-1)^2 relative-offset bias table."""
    key = (grid_h, grid_w, reach)
    hit = _rel_index_cache.get(key)
    if hit is not None:
        return hit
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()], axis=1)
    dy = np.clip(coords[:, None, 0] - coords[None, :, 0], -(reach - 1), reach - 1)
    dx = np.clip(coords[:, None, 1] - coords[None, :, 1], -(reach - 1), reach - 1)
    idx = (dy + reach - 1) * (2 * reach - 1) + (dx + reach - 1)
    _rel_index_cache[key] = idx
    return idx


_shift_mask_cache: dict[tuple, np.ndarray] = {}


def shifted_window_mask(hp: int, wp: int, window: int, shift: int) -> np.ndarray:
    """Additive attention mask that stops tokens wrapped by the cyclic shift
    from attending across their original image boundary."""
    key = (hp, wp, window, shift)
    hit = _shift_mask_cache.get(key)
    if hit is not None:
        return hit
    img = np.zeros((hp, wp))
    cnt = 0
    spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    for hsl in spans:
        for wsl in spans:
            img[hsl, wsl] = cnt
            cnt += 1
    nh, nw = hp // window, wp // window
    win = img.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(-1, window * window)
    diff = win[:, :, None] != win[:, None, :]
    mask = np.where(diff, -1e4, 0.0)[:, None, :, :]
    _shift_mask_cache[key] = mask
    return mask


def _linear_params(rng, n_in, n_out, dtype):
    return (E.lecun_uniform(rng, (n_in, n_out), n_in, dtype),
            E.zeros_param((n_out,), dtype))


def _ln_params(dim, dtype):
    return E.parameter(np.ones(dim), dtype=dtype), E.zeros_param((dim,), dtype)


class MultiHeadAttention:
    """Self-attention over a token set with a shared relative-position bias."""

    def __init__(self, rng, channels: int, heads: int, reach: int, dtype):
        self.heads = heads
        self.reach = reach
        self.w_q, self.b_q = _linear_params(rng, channels, channels, dtype)
        self.w_k, self.b_k = _linear_params(rng, channels, channels, dtype)
        self.w_v, self.b_v = _linear_params(rng, channels, channels, dtype)
        self.w_o, self.b_o = _linear_params(rng, channels, channels, dtype)
        table = (2 * reach - 1) ** 2
        self.rel_table = E.zeros_param((table,), dtype)

    def named(self, prefix):
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.b_q": self.b_q,
                f"{prefix}.w_k": self.w_k, f"{prefix}.b_k": self.b_k,
                f"{prefix}.w_v": self.w_v, f"{prefix}.b_v": self.b_v,
                f"{prefix}.w_o": self.w_o, f"{prefix}.b_o": self.b_o,
                f"{prefix}.rel_table": self.rel_table}

    def _split(self, t: Tensor, lead: tuple) -> Tensor:
        n, c = t.data.shape[-2:]
        dh = c // self.heads
        t = E.reshape(t, lead + (n, self.heads, dh))
        order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return E.transpose(t, order)

    def __call__(self, tokens: Tensor, grid: tuple[int, int],
                 mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        lead = tokens.data.shape[:-2]
        n, c = tokens.data.shape[-2:]
        q = self._split(E.add(E.matmul(tokens, self.w_q), self.b_q), lead)
        k = self._split(E.add(E.matmul(tokens, self.w_k), self.b_k), lead)
        v = self._split(E.add(E.matmul(tokens, self.w_v), self.b_v), lead)
        idx = relative_index(grid[0], grid[1], self.reach)
        bias = E.take_rows(self.rel_table, idx)
        out, attn = scaled_dot_attention(q, k, v, bias=bias, mask=mask)
        order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        out = E.transpose(out, order)
        out = E.reshape(out, lead + (n, c))
        return E.add(E.matmul(out, self.w_o), self.b_o), attn


class V1Stem:
    def __init__(self, rng, cfg: StackConfig, dtype):
        cin, cout = cfg.in_channels, cfg.stem_channels
        self.w1 = E.lecun_uniform(rng, (3, 3, cin, cout), 9 * cin, dtype)
        self.b1 = E.zeros_param((cout,), dtype)
        self.w2 = E.lecun_uniform(rng, (3, 3, cout, cout), 9 * cout, dtype)
        self.b2 = E.zeros_param((cout,), dtype)

    def named(self, prefix="stem"):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}

    def __call__(self, x0: Tensor) -> Tensor:
        h, w = x0.data.shape[:2]
        if h < 8 or w < 8:
            raise ShapeError(f"stem input {h}x{w} smaller than 8x8")
        y = E.conv2d(x0, standardize_kernel(self.w1), self.b1, stride=2, padding=1)
        y = E.selu(y)
        return E.conv2d(y, standardize_kernel(self.w2), self.b2, stride=2, padding=1)


class V2Block:
    def __init__(self, rng, cfg: StackConfig, dtype):
        c = cfg.stem_channels
        k = cfg.v2_kernel
        self.cfg = cfg
        self.w_dw = E.lecun_uniform(rng, (k, k, c), k * k, dtype)
        self.b_dw = E.zeros_param((c,), dtype)
        self.w_pw, self.b_pw = _linear_params(rng, c, c, dtype)
        self.ln1_g, self.ln1_b = _ln_params(c, dtype)
        self.attn = MultiHeadAttention(rng, c, cfg.v2_heads, cfg.max_rel_grid, dtype)
        self.ln2_g, self.ln2_b = _ln_params(c, dtype)

    def named(self, prefix="v2"):
        out = {f"{prefix}.w_dw": self.w_dw, f"{prefix}.b_dw": self.b_dw,
               f"{prefix}.w_pw": self.w_pw, f"{prefix}.b_pw": self.b_pw,
               f"{prefix}.ln1_g": self.ln1_g, f"{prefix}.ln1_b": self.ln1_b,
               f"{prefix}.ln2_g": self.ln2_g, f"{prefix}.ln2_b": self.ln2_b}
        out.update(self.attn.named(f"{prefix}.attn"))
        return out

    def __call__(self, x: Tensor, sigma_gain: float) -> Tensor:
        h, w, c = x.data.shape
        pad = self.cfg.v2_kernel // 2
        local = E.depthwise_conv2d(x, self.w_dw, self.b_dw, padding=pad)
        local = E.add(E.matmul(local, self.w_pw), self.b_pw)
        y = E.add(x, local)
        t = E.reshape(y, (h * w, c))
        a, _ = self.attn(E.layer_norm(t, self.ln1_g, self.ln1_b), (h, w))
        t = E.add(t, a)
        gain = E.mul(self.ln2_g, float(sigma_gain))
        out = E.layer_norm(t, gain, self.ln2_b)
        return E.reshape(out, (h, w, c))


def window_partition(x: Tensor, window: int) -> tuple[Tensor, tuple]:
    hp, wp, c = x.data.shape
    nh, nw = hp // window, wp // window
    t = E.reshape(x, (nh, window, nw, window, c))
    t = E.transpose(t, (0, 2, 1, 3, 4))
    return E.reshape(t, (nh * nw, window * window, c)), (nh, nw)


def window_merge(t: Tensor, window: int, grid: tuple, channels: int) -> Tensor:
    nh, nw = grid
    x = E.reshape(t, (nh, nw, window, window, channels))
    x = E.transpose(x, (0, 2, 1, 3, 4))
    return E.reshape(x, (nh * window, nw * window, channels))


class SwinBlock:
    def __init__(self, rng, cfg: StackConfig, shift: int, dtype):
        c = cfg.stem_channels
        self.cfg = cfg
        self.shift = shift
        self.ln1_g, self.ln1_b = _ln_params(c, dtype)
        self.attn = MultiHeadAttention(rng, c, cfg.v2_heads, cfg.window, dtype)
        self.ln2_g, self.ln2_b = _ln_params(c, dtype)
        hidden = c * cfg.mlp_ratio
        self.w_m1, self.b_m1 = _linear_params(rng, c, hidden, dtype)
        self.w_m2, self.b_m2 = _linear_params(rng, hidden, c, dtype)
        self.mem = M.MemoryParams.create(rng, c, cfg.memory_dim, dtype)
        self.w_proj, self.b_proj = _linear_params(rng, c + cfg.memory_dim, c, dtype)

    def named(self, prefix):
        out = {f"{prefix}.ln1_g": self.ln1_g, f"{prefix}.ln1_b": self.ln1_b,
               f"{prefix}.ln2_g": self.ln2_g, f"{prefix}.ln2_b": self.ln2_b,
               f"{prefix}.w_m1": self.w_m1, f"{prefix}.b_m1": self.b_m1,
               f"{prefix}.w_m2": self.w_m2, f"{prefix}.b_m2": self.b_m2,
               f"{prefix}.w_proj": self.w_proj, f"{prefix}.b_proj": self.b_proj}
        out.update(self.attn.named(f"{prefix}.attn"))
        out.update(self.mem.named(f"{prefix}.mem"))
        return out

    def _window_attention(self, x: Tensor) -> Tensor:
        h, w, c = x.data.shape
        win = self.cfg.window
        hp = int(np.ceil(h / win)) * win
        wp = int(np.ceil(w / win)) * win
        if (hp, wp) != (h, w):
            x = E.pad(x, ((0, hp - h), (0, wp - w), (0, 0)))
        mask = None
        if self.shift:
            x = E.roll(x, (-self.shift, -self.shift), (0, 1))
            mask = shifted_window_mask(hp, wp, win, self.shift)
        t, grid = window_partition(x, win)
        out, _ = self.attn(t, (win, win), mask=mask)
        x = window_merge(out, win, grid, c)
        if self.shift:
            x = E.roll(x, (self.shift, self.shift), (0, 1))
        if (hp, wp) != (h, w):
            x = x[0:h, 0:w, :]
        return x

    def __call__(self, x: Tensor, bank: Tensor, flags: RunFlags
                 ) -> tuple[Tensor, Tensor, M.WriteStats | None]:
        h, w, c = x.data.shape
        t_grid = E.add(x, self._window_attention(
            E.reshape(E.layer_norm(E.reshape(x, (h * w, c)), self.ln1_g, self.ln1_b), (h, w, c))))
        tokens = E.reshape(t_grid, (h * w, c))
        hidden = gelu(E.add(E.matmul(E.layer_norm(tokens, self.ln2_g, self.ln2_b), self.w_m1), self.b_m1))
        tokens = E.add(tokens, E.add(E.matmul(hidden, self.w_m2), self.b_m2))
        if not flags.memory_enabled:
            zeros = E.Tensor(np.zeros((tokens.data.shape[0], self.cfg.memory_dim)),
                             dtype=tokens.dtype)
            fused = E.concat([tokens, zeros], axis=1)
            out = E.add(E.matmul(fused, self.w_proj), self.b_proj)
            return E.reshape(out, (h, w, c)), bank, None
        read_out, attn = M.read(bank, tokens, self.mem)
        fused = E.concat([tokens, read_out], axis=1)
        out_tokens = E.add(E.matmul(fused, self.w_proj), self.b_proj)
        bank, stats = M.write(bank, out_tokens, attn, self.mem,
                              top_k=self.cfg.memory_top_k,
                              freeze_eta=flags.freeze_eta)
        return E.reshape(out_tokens, (h, w, c)), bank, stats


def sigma_gain(sigma_bars: dict[str, float], clip: float) -> float:
    mean_sigma = float(np.mean(list(sigma_bars.values())))
    return float(np.exp(-np.clip(mean_sigma, -clip, clip)))


class CorticalStack:
    def __init__(self, rng: np.random.Generator, cfg: StackConfig, dtype=np.float32):
        self.cfg = cfg
        self.stem = V1Stem(rng, cfg, dtype)
        self.v2 = V2Block(rng, cfg, dtype)
        shifts = [0 if i % 2 == 0 else cfg.window // 2 for i in range(cfg.v3_blocks)]
        self.blocks = [SwinBlock(rng, cfg, s, dtype) for i, s in enumerate(shifts)]

    def named(self):
        out = {}
        out.update(self.stem.named("stem"))
        out.update(self.v2.named("v2"))
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"v3.{i}"))
        return out

    def new_bank(self, dtype=None) -> Tensor:
        return M.reset(self.cfg.memory_slots, self.cfg.memory_dim,
                       dtype or self.stem.w1.dtype)

    def forward(self, x0: Tensor, sigma_bars: dict[str, float], bank: Tensor,
                flags: RunFlags | None = None
                ) -> tuple[Tensor, Tensor, list[M.WriteStats]]:
        flags = flags or RunFlags()
        fv1 = self.stem(x0)
        gain = sigma_gain(sigma_bars, self.cfg.sigma_gain_clip)
        x = fv1
        for _ in range(self.cfg.v2_iterations):
            x = self.v2(x, gain)
        if flags.slot_shuffle_fraction > 0 and flags.memory_enabled:
            bank = E.Tensor(M.shuffle_slots(bank.data, flags.slot_shuffle_fraction,
                                            flags.slot_shuffle_seed), dtype=bank.dtype)
        stats = []
        for blk in self.blocks:
            x, bank, st = blk(x, bank, flags)
            if st is not None:
                stats.append(st)
        return x, bank, stats
