"""Patch embedding and the gated positional self-attention backbone.

The feature extractor splits an image into non-overlapping patches, linearly
embeds them, runs a stack of gated positional self-attention (GPSA) blocks
followed by plain self-attention blocks, and mean-pools the patch embeddings
into one feature vector. There is no class token and no absolute positional
embedding; position enters only through the GPSA relative-position scores.

Per head, GPSA forms the attention matrix as a gated convex blend

    A = (1 - sigma) * softmax(Q K^T / sqrt(d_h)) + sigma * softmax(v_pos . r)

where r[i, j] = (|delta|^2, dx, dy) is the relative grid offset from patch i
to patch j and sigma = logistic(gate) is a learned per-head scalar. Rows of A
are re-normalized afterwards; with logistic gating that is mathematically a
no-op, and it is kept purely as a numerical safeguard. The blended matrix is
applied to the value projection, heads are concatenated, and an output
projection follows. At init the positional scores are shaped so each head
attends to a distinct neighbor offset, which makes the early blocks behave
like a generalized convolution until the gates learn otherwise.

A plain self-attention path over the same weights (gates and positional
scores ignored) doubles as the reference oracle for the sigma -> 0 limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fasdg import ops
from fasdg.errors import ConfigError, ShapeError
from fasdg.tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    heads: int = 4
    n_gpsa_blocks: int = 2
    n_sa_blocks: int = 2
    mlp_ratio: float = 2.0
    locality_strength: float = 1.0
    content_score_scaling: bool = True
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.n_gpsa_blocks < 1:
            raise ConfigError("need at least one gated attention block")
        if self.n_sa_blocks < 0 or self.mlp_ratio <= 0:
            raise ConfigError("invalid block count or mlp_ratio")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def head_offsets(n_heads: int) -> list[tuple[int, int]]:
    """Distinct nonzero integer offsets spiraling outward from the center.

    Sorted by squared radius, then by angle from the +x axis, so four heads
    get the four unit offsets and further heads fill the diagonals next.
    """
    r = 1
    candidates: list[tuple[int, int]] = []
    while len(candidates) < n_heads:
        ring = [
            (dx, dy)
            for dx in range(-r, r + 1)
            for dy in range(-r, r + 1)
            if (dx, dy) != (0, 0) and max(abs(dx), abs(dy)) == r
        ]
        ring.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, math.atan2(d[1], d[0]) % (2 * math.pi)))
        candidates.extend(ring)
        r += 1
    return candidates[:n_heads]


def rel_pos_table(grid: int) -> np.ndarray:
    """(P, P, 3) table of (|delta|^2, dx, dy) between patch grid positions.

    Patches are ordered row-major; delta points from patch i to patch j in
    patch units, so the dx/dy components are antisymmetric in (i, j).
    """
    ys, xs = np.divmod(np.arange(grid * grid), grid)
    dx = xs[None, :] - xs[:, None]
    dy = ys[None, :] - ys[:, None]
    table = np.stack([dx.astype(np.float64) ** 2 + dy**2, dx, dy], axis=-1)
    return table.astype(np.float64)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class AttnParams:
    """One attention block's projections; gpsa blocks also carry gates."""

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor
    b_o: Tensor
    v_pos: list[Tensor] | None = None
    gate: list[Tensor] | None = None

    @property
    def gated(self) -> bool:
        return self.v_pos is not None


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttnParams
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class BackboneWeights:
    embed_w: Tensor
    embed_b: Tensor
    final_ln_g: Tensor
    final_ln_b: Tensor
    blocks: list[BlockParams] = field(default_factory=list)

    def named_parameters(self):
        yield "embed.w", self.embed_w
        yield "embed.b", self.embed_b
        yield "final_ln.g", self.final_ln_g
        yield "final_ln.b", self.final_ln_b
        for i, blk in enumerate(self.blocks):
            base = f"blocks.{i}"
            yield f"{base}.ln1.g", blk.ln1_g
            yield f"{base}.ln1.b", blk.ln1_b
            for h, (wq, wk, wv) in enumerate(zip(blk.attn.w_q, blk.attn.w_k, blk.attn.w_v)):
                yield f"{base}.attn.q{h}", wq
                yield f"{base}.attn.k{h}", wk
                yield f"{base}.attn.v{h}", wv
            if blk.attn.gated:
                for h, (vp, g) in enumerate(zip(blk.attn.v_pos, blk.attn.gate)):
                    yield f"{base}.attn.vpos{h}", vp
                    yield f"{base}.attn.gate{h}", g
            yield f"{base}.attn.wo", blk.attn.w_o
            yield f"{base}.attn.bo", blk.attn.b_o
            yield f"{base}.ln2.g", blk.ln2_g
            yield f"{base}.ln2.b", blk.ln2_b
            yield f"{base}.mlp.w1", blk.mlp_w1
            yield f"{base}.mlp.b1", blk.mlp_b1
            yield f"{base}.mlp.w2", blk.mlp_w2
            yield f"{base}.mlp.b2", blk.mlp_b2


def init_locality(attn: AttnParams, alpha: float, offsets: list[tuple[int, int]]) -> None:
    """Point each head's positional attention at its offset.

    Sets v_pos so the positional score of patch i at patch j is
    -alpha * (|delta_ij - offset|^2 - |offset|^2), peaking exactly at the
    configured offset, and opens the gate (lambda = 1, sigma ~ 0.73) so the
    block starts positional-dominant.
    """
    if not attn.gated:
        raise ConfigError("init_locality: block has no positional parameters")
    if len(set(offsets)) != len(offsets):
        raise ConfigError("init_locality: head offsets must be distinct")
    for vp, g, (ox, oy) in zip(attn.v_pos, attn.gate, offsets):
        vec = np.array([-alpha, 2.0 * alpha * ox, 2.0 * alpha * oy], dtype=vp.dtype)
        vp.data[:, 0] = vec
        g.data[:] = 1.0


def _normal(rng, shape, std, dtype):
    return Tensor(
        (rng.standard_normal(shape) * std).astype(dtype), requires_grad=True
    )


def _fan_in(rng, shape, dtype):
    """Projection init scaled by 1/sqrt(fan_in) to keep activations O(1)."""
    return _normal(rng, shape, 1.0 / math.sqrt(shape[0]), dtype)


def _build_attn(cfg: BackboneConfig, rng, dtype, gated: bool) -> AttnParams:
    d, dh = cfg.embed_dim, cfg.head_dim
    mk = lambda: [_fan_in(rng, (d, dh), dtype) for _ in range(cfg.heads)]  # noqa: E731
    attn = AttnParams(
        w_q=mk(),
        w_k=mk(),
        w_v=mk(),
        w_o=_fan_in(rng, (d, d), dtype),
        b_o=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
    )
    if gated:
        attn.v_pos = [
            Tensor(np.zeros((3, 1), dtype=dtype), requires_grad=True)
            for _ in range(cfg.heads)
        ]
        attn.gate = [
            Tensor(np.ones(1, dtype=dtype), requires_grad=True) for _ in range(cfg.heads)
        ]
        init_locality(attn, cfg.locality_strength, head_offsets(cfg.heads))
    return attn


def _build_block(cfg: BackboneConfig, rng, dtype, gated: bool) -> BlockParams:
    d, m = cfg.embed_dim, cfg.mlp_dim
    ones = lambda: Tensor(np.ones(d, dtype=dtype), requires_grad=True)  # noqa: E731
    zeros = lambda n: Tensor(np.zeros(n, dtype=dtype), requires_grad=True)  # noqa: E731
    return BlockParams(
        ln1_g=ones(),
        ln1_b=zeros(d),
        attn=_build_attn(cfg, rng, dtype, gated),
        ln2_g=ones(),
        ln2_b=zeros(d),
        mlp_w1=_fan_in(rng, (d, m), dtype),
        mlp_b1=zeros(m),
        mlp_w2=_fan_in(rng, (m, d), dtype),
        mlp_b2=zeros(d),
    )


def build_backbone_weights(
    cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32
) -> BackboneWeights:
    weights = BackboneWeights(
        embed_w=_fan_in(rng, (cfg.patch_dim, cfg.embed_dim), dtype),
        embed_b=Tensor(np.zeros(cfg.embed_dim, dtype=dtype), requires_grad=True),
        final_ln_g=Tensor(np.ones(cfg.embed_dim, dtype=dtype), requires_grad=True),
        final_ln_b=Tensor(np.zeros(cfg.embed_dim, dtype=dtype), requires_grad=True),
    )
    for _ in range(cfg.n_gpsa_blocks):
        weights.blocks.append(_build_block(cfg, rng, dtype, gated=True))
    for _ in range(cfg.n_sa_blocks):
        weights.blocks.append(_build_block(cfg, rng, dtype, gated=False))
    return weights


# ---------------------------------------------------------------------------
# forward pass


def extract_patches(images: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, P, p*p*C), patches in row-major grid order."""
    b, h, w, c = images.shape
    if h != cfg.image_size or w != cfg.image_size or c != cfg.channels:
        raise ConfigError(
            f"image shape {(h, w, c)} does not match configured "
            f"{(cfg.image_size, cfg.image_size, cfg.channels)}"
        )
    g, p = cfg.grid_size, cfg.patch_size
    tiles = images.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles.reshape(b, g * g, p * p * c))


def patch_embed(image: np.ndarray, weights: BackboneWeights, cfg: BackboneConfig) -> Tensor:
    """Embed one (H, W, C) image into a (P, d) patch sequence."""
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise ConfigError(f"patch_embed expects one (H, W, C) image, got {arr.shape}")
    out = _embed_batch(arr[None], weights, cfg)
    return ops.reshape(out, (cfg.n_patches, cfg.embed_dim))


def _embed_batch(images: np.ndarray, weights: BackboneWeights, cfg: BackboneConfig) -> Tensor:
    dtype = weights.embed_w.dtype
    patches = extract_patches(images.astype(dtype, copy=False), cfg)
    b = patches.shape[0]
    flat = Tensor(patches.reshape(b * cfg.n_patches, cfg.patch_dim))
    emb = ops.add(ops.matmul(flat, weights.embed_w), weights.embed_b)
    return ops.reshape(emb, (b, cfg.n_patches, cfg.embed_dim))


def _positional_scores(attn: AttnParams, head: int, rel: np.ndarray, dtype) -> Tensor:
    p = rel.shape[0]
    r_flat = Tensor(rel.reshape(p * p, 3).astype(dtype, copy=False))
    s = ops.matmul(r_flat, attn.v_pos[head])
    return ops.reshape(s, (p, p))


def _attention(
    x: Tensor,
    attn: AttnParams,
    cfg: BackboneConfig,
    rel: np.ndarray | None,
    attn_sink: list | None = None,
) -> Tensor:
    """Multi-head attention over (B, P, d); gated positional when rel is given."""
    b, p, d = x.shape
    dh = cfg.head_dim
    x2 = ops.reshape(x, (b * p, d))
    inv_sqrt = 1.0 / math.sqrt(dh) if cfg.content_score_scaling else 1.0
    heads_out = []
    sink_entry = {} if attn_sink is not None else None
    for h in range(cfg.heads):
        q = ops.reshape(ops.matmul(x2, attn.w_q[h]), (b, p, dh))
        k = ops.reshape(ops.matmul(x2, attn.w_k[h]), (b, p, dh))
        v = ops.reshape(ops.matmul(x2, attn.w_v[h]), (b, p, dh))
        scores = ops.bmm(q, ops.transpose(k, (0, 2, 1)))
        if inv_sqrt != 1.0:
            scores = ops.scale(scores, inv_sqrt)
        content = ops.softmax_rows(scores)
        if attn.gated and rel is not None:
            pos = ops.softmax_rows(_positional_scores(attn, h, rel, x.dtype))
            sigma = ops.logistic(attn.gate[h])
            blended = ops.add(
                ops.multiply(ops.add_scalar(ops.scale(sigma, -1.0), 1.0), content),
                ops.multiply(sigma, pos),
            )
            a = ops.normalize_rows(blended)
            if sink_entry is not None:
                sink_entry[h] = {
                    "content": content.data.copy(),
                    "positional": pos.data.copy(),
                    "blended": blended.data.copy(),
                    "final": a.data.copy(),
                    "sigma": float(sigma.data[0]),
                }
        else:
            a = content
            if sink_entry is not None:
                sink_entry[h] = {"content": content.data.copy(), "final": a.data.copy()}
        heads_out.append(ops.bmm(a, v))
    joined = ops.concat_last(heads_out)
    out = ops.add(ops.matmul(ops.reshape(joined, (b * p, d)), attn.w_o), attn.b_o)
    if attn_sink is not None:
        attn_sink.append(sink_entry)
    return ops.reshape(out, (b, p, d))


def gpsa_attention(
    x_p: Tensor,
    attn: AttnParams,
    rel: np.ndarray,
    cfg: BackboneConfig,
    attn_sink: list | None = None,
) -> Tensor:
    """Gated positional self-attention over one (P, d) patch sequence."""
    if not attn.gated:
        raise ConfigError("gpsa_attention called with ungated parameters")
    if rel.shape[0] != x_p.shape[0]:
        raise ShapeError(
            f"relative table for {rel.shape[0]} patches vs sequence of {x_p.shape[0]}"
        )
    p, d = x_p.shape
    out = _attention(ops.reshape(x_p, (1, p, d)), attn, cfg, rel, attn_sink)
    return ops.reshape(out, (p, d))


def sa_attention(x_p: Tensor, attn: AttnParams, cfg: BackboneConfig) -> Tensor:
    """Vanilla multi-head self-attention over one (P, d) sequence."""
    p, d = x_p.shape
    out = _attention(ops.reshape(x_p, (1, p, d)), attn, cfg, rel=None)
    return ops.reshape(out, (p, d))


def _block_forward(x, blk, cfg, rel, attn_sink=None, force_vanilla=False):
    b, p, d = x.shape
    h = ops.layer_norm(ops.reshape(x, (b * p, d)), blk.ln1_g, blk.ln1_b)
    use_rel = rel if (blk.attn.gated and not force_vanilla) else None
    att = _attention(ops.reshape(h, (b, p, d)), blk.attn, cfg, use_rel, attn_sink)
    x = ops.add(x, att)
    h = ops.layer_norm(ops.reshape(x, (b * p, d)), blk.ln2_g, blk.ln2_b)
    m = ops.gelu(ops.add(ops.matmul(h, blk.mlp_w1), blk.mlp_b1))
    m = ops.add(ops.matmul(m, blk.mlp_w2), blk.mlp_b2)
    return ops.add(x, ops.reshape(m, (b, p, d)))


def backbone_forward(
    images: np.ndarray,
    weights: BackboneWeights,
    cfg: BackboneConfig,
    attn_sink: list | None = None,
    force_vanilla: bool = False,
) -> Tensor:
    """Extract mean-pooled features: (B, H, W, C) -> (B, d), or (H, W, C) -> (d,).

    ``force_vanilla`` runs every block as plain self-attention on the same
    weights; this is the reference the gated path must match as the gates
    close.
    """
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ConfigError(f"expected (B, H, W, C) images, got {arr.shape}")
    rel = rel_pos_table(cfg.grid_size)
    x = _embed_batch(arr, weights, cfg)
    for blk in weights.blocks:
        x = _block_forward(x, blk, cfg, rel, attn_sink, force_vanilla)
    b, p, d = x.shape
    x = ops.reshape(
        ops.layer_norm(ops.reshape(x, (b * p, d)), weights.final_ln_g, weights.final_ln_b),
        (b, p, d),
    )
    feats = ops.mean_axis(x, 1)
    if single:
        feats = ops.reshape(feats, (cfg.embed_dim,))
    return feats
