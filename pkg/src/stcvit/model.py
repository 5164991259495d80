"""STC-ViT encoder, its attention mechanisms and the ablation variants."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .data import derivative_names
from .nn import INIT_STD, FeedForward, LayerNorm, Linear, Module, param
from .ode import DivergenceError, OdeProblem, integrate
from .tensor import Tensor, concat, dropout, get_default_dtype, softmax

VARIANTS = (
    "full",
    "vanilla_vit",
    "vanilla_node",
    "continuous_attention_only",
    "vanilla_attention_plus_node",
)
SOLVERS = ("rk4", "euler")


class BlockDivergenceError(FloatingPointError):
    def __init__(self, block: int, step: int):
        self.block = block
        self.step = step
        super().__init__(f"ODE state in block {block} became non-finite at solver step {step}")


@dataclass
class ModelConfig:
    var_names: tuple[str, ...]
    img_size: tuple[int, int]
    patch_size: int = 2
    heads: int = 4
    depth: int = 2
    dim: int = 128
    dropout: float = 0.1
    ode_steps: int = 2
    ode_solver: str = "rk4"
    variant: str = "full"
    mlp_ratio: int = 4

    def __post_init__(self):
        self.var_names = tuple(self.var_names)
        self.img_size = tuple(int(s) for s in self.img_size)
        self.validate()

    def validate(self) -> None:
        errors = []
        h, w = self.img_size
        if self.dim % self.heads:
            errors.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if h % self.patch_size or w % self.patch_size:
            errors.append(f"grid {h}x{w} not divisible by patch size {self.patch_size}")
        if self.variant not in VARIANTS:
            errors.append(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.ode_solver not in SOLVERS:
            errors.append(f"unknown ode_solver {self.ode_solver!r}")
        if self.ode_steps < 1 or self.depth < 1 or self.heads < 1 or self.dim < 1:
            errors.append("ode_steps, depth, heads and dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            errors.append(f"dropout {self.dropout} outside [0, 1)")
        if len(set(self.var_names)) != len(self.var_names) or not self.var_names:
            errors.append("var_names must be non-empty and unique")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def in_names(self) -> tuple[str, ...]:
        """Input channels: raw fields followed by their temporal derivatives."""
        return self.var_names + derivative_names(self.var_names)

    @property
    def n_tokens(self) -> int:
        h, w = self.img_size
        return (h // self.patch_size) * (w // self.patch_size)

    @classmethod
    def reference_profile(cls, var_names, img_size, **overrides) -> "ModelConfig":
        base = dict(patch_size=2, heads=16, depth=4, dim=1024, dropout=0.1)
        base.update(overrides)
        return cls(var_names, img_size, **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["var_names"] = list(self.var_names)
        d["img_size"] = list(self.img_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# -- attention primitives ---------------------------------------------------------------
def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


class AttentionProjections(Module):
    """Bias-free query/key/value/output projections."""

    def __init__(self, rng: np.random.Generator, dim: int):
        dt = get_default_dtype()
        self.w_q = param(rng.normal(0.0, INIT_STD, (dim, dim)).astype(dt))
        self.w_k = param(rng.normal(0.0, INIT_STD, (dim, dim)).astype(dt))
        self.w_v = param(rng.normal(0.0, INIT_STD, (dim, dim)).astype(dt))
        self.w_o = param(rng.normal(0.0, INIT_STD, (dim, dim)).astype(dt))


def spatial_attention(
    h: Tensor,
    proj: AttentionProjections,
    heads: int,
    rate: float = 0.0,
    rng=None,
    training: bool = False,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product self-attention over token positions.

    ``h`` is ``[B, T, D]``; the weights are ``[B, heads, T, T]`` with rows
    summing to one.
    """
    dk = h.shape[-1] // heads
    q = split_heads(h @ proj.w_q, heads)
    k = split_heads(h @ proj.w_k, heads)
    v = split_heads(h @ proj.w_v, heads)
    weights = softmax((q @ k.swapaxes(-1, -2)).scale(1.0 / math.sqrt(dk)), axis=-1)
    out = merge_heads(dropout(weights, rate, rng, training) @ v) @ proj.w_o
    return (out, weights) if return_weights else out


def temporal_continuous_attention(
    tok_curr: Tensor,
    tok_prev: Tensor,
    proj: AttentionProjections,
    heads: int,
    rate: float = 0.0,
    rng=None,
    training: bool = False,
    return_weights: bool = False,
):
    """Attention scored by the product rule on query/key evolution.

    With ``d = tok_curr - tok_prev`` (one unit token-step finite difference):
    ``Q = d W_Q``, ``K = (tok_prev + d) W_K``, ``dQ/dt = d W_Q``,
    ``dK/dt = d W_K`` and ``V = tok_prev W_V``.  Per token ``i`` and head,
    ``Y_i = sum(Q_i * dK_i + K_i * dQ_i)``; the weights ``softmax(Y / sqrt(d_k))``
    run over the token axis and pool the values into one vector per head,
    projected by ``W_O``.

    Returns ``[B, 1, D]`` (broadcast over positions by :func:`fuse`); the weights
    are ``[B, T, heads]`` and the raw scores ``Y`` are ``[B, T, heads]``.
    """
    if tok_curr.shape != tok_prev.shape:
        raise ValueError(f"time steps disagree in shape: {tok_curr.shape} vs {tok_prev.shape}")
    b, t, d_model = tok_curr.shape
    dk = d_model // heads
    d = tok_curr - tok_prev
    dq = d @ proj.w_q
    dkey = d @ proj.w_k
    q = dq
    key = (tok_prev + d) @ proj.w_k
    scores = (q * dkey + key * dq).reshape(b, t, heads, dk).sum(axis=-1)
    weights = softmax(scores.scale(1.0 / math.sqrt(dk)), axis=1)
    v = (tok_prev @ proj.w_v).reshape(b, t, heads, dk)
    w = dropout(weights, rate, rng, training).reshape(b, t, heads, 1)
    pooled = (w * v).sum(axis=1).reshape(b, 1, d_model)
    out = pooled @ proj.w_o
    return (out, weights, scores) if return_weights else out


def fuse(tca_out: Tensor, sa_out: Tensor, w_f: Tensor, rate: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Concatenate TCA and SA along features and project ``2D -> D``."""
    if tca_out.shape[0] != sa_out.shape[0] or tca_out.shape[1] not in (1, sa_out.shape[1]):
        raise ValueError(f"cannot fuse token grids {tca_out.shape} and {sa_out.shape}")
    if tca_out.shape != sa_out.shape:
        tca_out = tca_out.broadcast_to(sa_out.shape)
    stacked = concat([tca_out, sa_out], axis=-1)
    return dropout(stacked @ w_f, rate, rng, training)


# -- tokenisation --------------------------------------------------------------------------
def sincos_2d(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal position table ``[grid_h * grid_w, dim]``."""
    quarter = dim // 4
    out = np.zeros((grid_h * grid_w, dim))
    if quarter == 0:
        return out
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    yy, xx = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    parts = []
    for pos in (yy.reshape(-1), xx.reshape(-1)):
        ang = np.outer(pos, omega)
        parts += [np.sin(ang), np.cos(ang)]
    out[:, : 4 * quarter] = np.concatenate(parts, axis=1)
    return out


def patchify(x: Tensor, p: int) -> Tensor:
    """``[B, C, H, W] -> [B, C, T, p*p]`` with row-major patch order."""
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"spatial extents {h}x{w} not divisible by patch size {p}")
    return x.reshape(b, c, h // p, p, w // p, p).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, (h // p) * (w // p), p * p)


def unpatchify(x: Tensor, channels: int, h: int, w: int, p: int) -> Tensor:
    """``[B, T, C*p*p] -> [B, C, H, W]``; inverse of :func:`patchify`."""
    b = x.shape[0]
    return x.reshape(b, h // p, w // p, channels, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, channels, h, w)


class Tokenizer(Module):
    """Per-variable patch embedding followed by cross-variable attention pooling.

    Embeddings are keyed by channel name, so channel order in the input does
    not matter as long as ``names`` follows it.
    """

    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        dt = get_default_dtype()
        p, d = config.patch_size, config.dim
        names = config.in_names
        self._names = names
        self._row = {n: i for i, n in enumerate(names)}
        self._p = p
        self.embed_w = param(rng.normal(0.0, INIT_STD, (len(names), p * p, d)).astype(dt))
        self.embed_b = param(np.zeros((len(names), 1, d), dtype=dt))
        self.var_embed = param(rng.normal(0.0, INIT_STD, (len(names), 1, d)).astype(dt))
        self.agg_query = param(rng.normal(0.0, INIT_STD, (d, 1)).astype(dt))
        self.agg_key = param(rng.normal(0.0, INIT_STD, (d, d)).astype(dt))
        self.agg_value = param(rng.normal(0.0, INIT_STD, (d, d)).astype(dt))
        h, w = config.img_size
        self._pos = sincos_2d(h // p, w // p, d).astype(dt)

    def forward(self, x, names: Sequence[str] | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        names = self._names if names is None else tuple(names)
        if x.shape[1] != len(names):
            raise ValueError(f"{x.shape[1]} channels but {len(names)} names")
        patches = patchify(x, self._p)
        if names == self._names:
            w, b, ve = self.embed_w, self.embed_b, self.var_embed
        else:
            idx = np.array([self._row[n] for n in names])
            w, b, ve = self.embed_w[idx], self.embed_b[idx], self.var_embed[idx]
        tokens = patches @ w + (b + ve)  # [B, C, T, D]
        d = tokens.shape[-1]
        scores = ((tokens @ self.agg_key) @ self.agg_query).scale(1.0 / math.sqrt(d))  # [B, C, T, 1]
        weights = softmax(scores, axis=1)
        pooled = (weights * (tokens @ self.agg_value)).sum(axis=1)  # [B, T, D]
        return pooled + self._pos


# -- blocks ------------------------------------------------------------------------------
class STCBlock(Module):
    """Encoder block for every transformer variant.

    ``mixer`` selects the attention path (``"stc"`` = TCA + SA fused, ``"sa"``
    = plain self-attention); ``ode_attention`` integrates the attention update
    as a vector field instead of adding it once; ``ode_ffn`` does the same for
    the feed-forward update.
    """

    def __init__(self, rng, config: ModelConfig, index: int, drop_rng, mixer: str, ode_attention: bool, ode_ffn: bool):
        dt = get_default_dtype()
        d = config.dim
        self.norm1 = LayerNorm(d)
        self.sa = AttentionProjections(rng, d)
        if mixer == "stc":
            self.tca = AttentionProjections(rng, d)
            self.w_f = param(rng.normal(0.0, INIT_STD, (2 * d, d)).astype(dt))
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(rng, d, config.mlp_ratio * d)
        self._mixer = mixer
        self._ode_attention = ode_attention
        self._ode_ffn = ode_ffn
        self._cfg = config
        self._index = index
        self._rng = drop_rng

    def attention_field(self, h: Tensor, prev_n: Tensor | None) -> Tensor:
        cfg = self._cfg
        hn = self.norm1(h)
        sa = spatial_attention(hn, self.sa, cfg.heads, cfg.dropout, self._rng, self.training)
        if self._mixer == "sa":
            return sa
        tca = temporal_continuous_attention(hn, prev_n, self.tca, cfg.heads, cfg.dropout, self._rng, self.training)
        return fuse(tca, sa, self.w_f, cfg.dropout, self._rng, self.training)

    def ffn_field(self, h: Tensor) -> Tensor:
        return self.ff(self.norm2(h))

    def _solve(self, field, h: Tensor) -> Tensor:
        cfg = self._cfg
        try:
            return integrate(OdeProblem(field, 0.0, 1.0, cfg.ode_steps, cfg.ode_solver), h)
        except DivergenceError as exc:
            raise BlockDivergenceError(self._index, exc.step) from exc

    def forward(self, h: Tensor, tok_prev: Tensor | None = None) -> Tensor:
        prev_n = self.norm1(tok_prev) if self._mixer == "stc" else None
        if self._ode_attention:
            h = self._solve(lambda s, t: self.attention_field(s, prev_n), h)
        else:
            h = h + self.attention_field(h, prev_n)
        if self._ode_ffn:
            h = self._solve(lambda s, t: self.ffn_field(s), h)
        else:
            h = h + self.ffn_field(h)
        if not np.all(np.isfinite(h.data)):
            raise BlockDivergenceError(self._index, -1)
        return h


_BLOCK_LAYOUT = {
    # variant: (mixer, ode_attention, ode_ffn)
    "full": ("stc", True, False),
    "continuous_attention_only": ("stc", False, False),
    "vanilla_vit": ("sa", False, False),
    "vanilla_attention_plus_node": ("sa", False, True),
}


class STCViT(Module):
    """Tokenise both time steps, run the encoder blocks, decode to the next state.

    Inputs are normalised ``[B, 2V, H, W]`` stacks (fields then derivatives).
    The prediction is the current raw-field channels plus the decoded update.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.variant not in _BLOCK_LAYOUT:
            raise ValueError(f"STCViT does not build variant {config.variant!r}")
        self.config = config
        rng = np.random.default_rng(seed)
        self._drop_rng = np.random.default_rng([seed, 1])
        self.tokenizer = Tokenizer(rng, config)
        mixer, ode_attn, ode_ffn = _BLOCK_LAYOUT[config.variant]
        self._uses_prev = mixer == "stc"
        self.blocks = [
            STCBlock(rng, config, i, self._drop_rng, mixer, ode_attn, ode_ffn) for i in range(config.depth)
        ]
        p, nv = config.patch_size, len(config.var_names)
        self.head_norm = LayerNorm(config.dim)
        self.head = Linear(rng, config.dim, nv * p * p)

    def forward(self, x_curr, x_prev=None, names: Sequence[str] | None = None) -> Tensor:
        cfg = self.config
        x_curr = x_curr if isinstance(x_curr, Tensor) else Tensor(x_curr)
        h = self.tokenizer(x_curr, names)
        tok_prev = None
        if self._uses_prev:
            if x_prev is None:
                raise ValueError(f"variant {cfg.variant!r} needs the previous time step")
            tok_prev = self.tokenizer(x_prev, names)
        for block in self.blocks:
            h = block(h, tok_prev)
        out = self.head(self.head_norm(h))
        hh, ww = cfg.img_size
        update = unpatchify(out, len(cfg.var_names), hh, ww, cfg.patch_size)
        return _residual_base(x_curr, cfg, names) + update


def _residual_base(x_curr: Tensor, cfg: ModelConfig, names) -> Tensor:
    names = cfg.in_names if names is None else tuple(names)
    idx = [names.index(v) for v in cfg.var_names]
    if idx == list(range(len(idx))):
        return x_curr[:, : len(idx)]
    return x_curr[:, np.array(idx)]


class VanillaNODE(Module):
    """Neural ODE over the flattened grid, no attention."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        h, w = config.img_size
        n_in = len(config.in_names) * h * w
        n_out = len(config.var_names) * h * w
        d = config.dim
        self.encoder = Linear(rng, n_in, d)
        self.norm = LayerNorm(d)
        self.field = FeedForward(rng, d, config.mlp_ratio * d)
        self.decoder = Linear(rng, d, n_out)

    def forward(self, x_curr, x_prev=None, names: Sequence[str] | None = None) -> Tensor:
        cfg = self.config
        x_curr = x_curr if isinstance(x_curr, Tensor) else Tensor(x_curr)
        if names is not None and tuple(names) != cfg.in_names:
            order = [tuple(names).index(n) for n in cfg.in_names]
            x_curr = x_curr[:, np.array(order)]
            names = None
        b = x_curr.shape[0]
        z = self.encoder(x_curr.reshape(b, -1))
        try:
            z = integrate(OdeProblem(lambda s, t: self.field(self.norm(s)), 0.0, 1.0, cfg.ode_steps, cfg.ode_solver), z)
        except DivergenceError as exc:
            raise BlockDivergenceError(0, exc.step) from exc
        hh, ww = cfg.img_size
        update = self.decoder(z).reshape(b, len(cfg.var_names), hh, ww)
        return _residual_base(x_curr, cfg, names) + update


def build_variant(config: ModelConfig, seed: int = 0) -> Module:
    if config.variant not in VARIANTS:
        raise ValueError(f"unknown variant {config.variant!r}; expected one of {VARIANTS}")
    if config.variant == "vanilla_node":
        return VanillaNODE(config, seed)
    return STCViT(config, seed)


def with_variant(config: ModelConfig, variant: str) -> ModelConfig:
    return replace(config, variant=variant)
