"""The decoder-only network: multi-modal input embedding, TransformerXL-style
blocks with segment memory, masked next-token loss with explicit backprop, and
constrained autoregressive decoding.
"""
from dataclasses import dataclass, field

import numpy as np

from .. import vocab
from ..errors import NumericalError, RangeError, SpecMismatchError
from ..modality import (
    ACTION_POS,
    KIND_PATCH,
    ContinuousAction,
    DiscreteAction,
    TextAction,
    TokenStream,
)
from . import attention, layers
from .config import ModelConfig

PAD_POS = -2  # local_pos marker for padding entries (no local encoding added)


# ---------------------------------------------------------------------------
# parameters

def init_params(cfg: ModelConfig, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    d = cfg.width
    ch = cfg.patch_channels
    tn = lambda *shape: layers.trunc_normal(rng, shape, 0.02, dtype)
    zeros = lambda *shape: np.zeros(shape, dtype)
    ones = lambda *shape: np.ones(shape, dtype)

    p = {
        "embed.table": tn(cfg.table_size, d),
        "embed.pos_row": tn(cfg.pos_vocab, d),
        "embed.pos_col": tn(cfg.pos_vocab, d),
        "embed.local": tn(cfg.local_pos_vocab, d),
        "embed.action": tn(d),
        "patch.in.W": tn(3, 3, 3, ch),
        "patch.in.b": zeros(ch),
        "patch.gn1.g": ones(ch),
        "patch.gn1.b": zeros(ch),
        "patch.conv1.W": tn(3, 3, ch, ch),
        "patch.conv1.b": zeros(ch),
        "patch.gn2.g": ones(ch),
        "patch.gn2.b": zeros(ch),
        "patch.conv2.W": tn(3, 3, ch, ch),
        "patch.conv2.b": zeros(ch),
        "patch.proj.W": tn((vocab.PATCH_SIZE // cfg.patch_pool) ** 2 * ch, d),
        "patch.proj.b": zeros(d),
    }
    if not cfg.tied_embedding:
        p["head.W"] = tn(cfg.table_size, d)
    for i in range(cfg.blocks):
        p[f"b{i}.ln1.g"] = ones(d)
        p[f"b{i}.ln1.b"] = zeros(d)
        p[f"b{i}.attn.Wq"] = tn(d, d)
        p[f"b{i}.attn.Wk"] = tn(d, d)
        p[f"b{i}.attn.Wv"] = tn(d, d)
        p[f"b{i}.attn.Wo"] = tn(d, d)
        p[f"b{i}.attn.Wr"] = tn(d, d)
        p[f"b{i}.attn.u"] = zeros(cfg.heads, cfg.head_dim)
        p[f"b{i}.attn.v"] = zeros(cfg.heads, cfg.head_dim)
        p[f"b{i}.ln2.g"] = ones(d)
        p[f"b{i}.ln2.b"] = zeros(d)
        p[f"b{i}.ffn.W1"] = tn(d, cfg.ffn_size)
        p[f"b{i}.ffn.b1"] = zeros(cfg.ffn_size)
        p[f"b{i}.ffn.W2"] = tn(d, cfg.ffn_size)
        p[f"b{i}.ffn.b2"] = zeros(cfg.ffn_size)
        p[f"b{i}.ffn.W3"] = tn(cfg.ffn_size, d)
        p[f"b{i}.ffn.b3"] = zeros(d)
    if cfg.norm_placement == "pre":
        p["final.g"] = ones(d)
        p["final.b"] = zeros(d)
    return p


def head_matrix(params, cfg):
    return params["embed.table"] if cfg.tied_embedding else params["head.W"]


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    """Dense model inputs for B sequences of length T."""

    tokens: np.ndarray  # (B,T) int32; patch slots and padding hold PAD_ID
    kinds: np.ndarray  # (B,T) uint8
    local_pos: np.ndarray  # (B,T) int32; PAD_POS on padding, ACTION_POS on actions
    pos_row: np.ndarray  # (B,T) int16
    pos_col: np.ndarray  # (B,T) int16
    patch_pixels: np.ndarray  # (Np,16,16,3) float32
    patch_b: np.ndarray  # (Np,) int32
    patch_t: np.ndarray  # (Np,) int32
    targets: np.ndarray  # (B,T) int32, -1 where no symbol target
    loss_mask: np.ndarray  # (B,T) uint8, mask on the prediction position
    meta: list = field(default_factory=list)

    @property
    def shape(self):
        return self.tokens.shape


def _patch_rgb(p):
    px = p.pixels
    if px.shape[2] == 3:
        return px
    return np.repeat(px, 3, axis=2)[:, :, :3]


def batch_from_streams(streams, seq_len):
    """Left-pad/right-truncate TokenStreams to seq_len and shift targets.

    Position t is supervised (loss_mask 1) when entry t+1 is a symbol whose
    stream mask is 1; padding and patch targets are masked out.
    """
    B = len(streams)
    T = seq_len
    tokens = np.full((B, T), vocab.PAD_ID, np.int32)
    kinds = np.zeros((B, T), np.uint8)
    local_pos = np.full((B, T), PAD_POS, np.int32)
    pos_row = np.full((B, T), -1, np.int16)
    pos_col = np.full((B, T), -1, np.int16)
    targets = np.full((B, T), -1, np.int32)
    loss_mask = np.zeros((B, T), np.uint8)
    pixels, pb, pt = [], [], []
    for b, s in enumerate(streams):
        s = s.slice(0, T)
        n = len(s)
        off = T - n  # left padding
        sym = s.kinds == 0
        tokens[b, off:][sym] = s.tokens[sym]
        kinds[b, off:] = s.kinds
        local_pos[b, off:] = s.local_pos
        pos_row[b, off:] = s.pos_row
        pos_col[b, off:] = s.pos_col
        for i, p in enumerate(s.patches):
            if p is not None:
                pixels.append(_patch_rgb(p))
                pb.append(b)
                pt.append(off + i)
        # next-entry targets
        nxt_sym = sym[1:]
        t_idx = np.arange(off, off + n - 1)
        targets[b, t_idx[nxt_sym]] = s.tokens[1:][nxt_sym]
        loss_mask[b, t_idx] = s.loss_mask[1:] * nxt_sym
    px = (
        np.stack(pixels).astype(np.float32)
        if pixels
        else np.zeros((0, vocab.PATCH_SIZE, vocab.PATCH_SIZE, 3), np.float32)
    )
    return Batch(
        tokens, kinds, local_pos, pos_row, pos_col,
        px, np.array(pb, np.int32), np.array(pt, np.int32),
        targets, loss_mask,
    )


def stream_to_batch(stream: TokenStream):
    return batch_from_streams([stream], len(stream))


# ---------------------------------------------------------------------------
# patch embedder (ResNet-v2 style residual conv block + projection)

def _patch_embed_fwd(params, cfg, pixels, dtype):
    x = pixels.astype(dtype)
    h1, c_in = layers.conv3x3_fwd(x, params["patch.in.W"], params["patch.in.b"])
    g1, c_g1 = layers.groupnorm_fwd(h1, params["patch.gn1.g"], params["patch.gn1.b"], cfg.gn_groups)
    a1, c_a1 = layers.gelu_fwd(g1)
    c1, c_c1 = layers.conv3x3_fwd(a1, params["patch.conv1.W"], params["patch.conv1.b"])
    g2, c_g2 = layers.groupnorm_fwd(c1, params["patch.gn2.g"], params["patch.gn2.b"], cfg.gn_groups)
    a2, c_a2 = layers.gelu_fwd(g2)
    c2, c_c2 = layers.conv3x3_fwd(a2, params["patch.conv2.W"], params["patch.conv2.b"])
    h2 = h1 + c2
    pooled, c_pool = layers.avgpool_fwd(h2, cfg.patch_pool)
    flat = pooled.reshape(pooled.shape[0], -1)
    out, c_proj = layers.linear_fwd(flat, params["patch.proj.W"], params["patch.proj.b"])
    cache = (c_in, c_g1, c_a1, c_c1, c_g2, c_a2, c_c2, c_pool, pooled.shape, c_proj)
    return out, cache


def _patch_embed_bwd(dout, cache, grads):
    c_in, c_g1, c_a1, c_c1, c_g2, c_a2, c_c2, c_pool, pshape, c_proj = cache
    dflat, dW, db = layers.linear_bwd(dout, c_proj)
    grads["patch.proj.W"] += dW
    grads["patch.proj.b"] += db
    dh2 = layers.avgpool_bwd(dflat.reshape(pshape), c_pool)
    da2, dW, db = layers.conv3x3_bwd(dh2, c_c2)
    grads["patch.conv2.W"] += dW
    grads["patch.conv2.b"] += db
    dg2 = layers.gelu_bwd(da2, c_a2)
    dc1, dg, db = layers.groupnorm_bwd(dg2, c_g2)
    grads["patch.gn2.g"] += dg
    grads["patch.gn2.b"] += db
    da1, dW, db = layers.conv3x3_bwd(dc1, c_c1)
    grads["patch.conv1.W"] += dW
    grads["patch.conv1.b"] += db
    dg1 = layers.gelu_bwd(da1, c_a1)
    dh1, dg, db = layers.groupnorm_bwd(dg1, c_g1)
    grads["patch.gn1.g"] += dg
    grads["patch.gn1.b"] += db
    dh1 = dh1 + dh2  # residual skip
    _, dW, db = layers.conv3x3_bwd(dh1, c_in)
    grads["patch.in.W"] += dW
    grads["patch.in.b"] += db


# ---------------------------------------------------------------------------
# input embedding

def embed_fwd(params, cfg: ModelConfig, batch: Batch, train=False, rng=None):
    if batch.tokens.max(initial=0) >= cfg.table_size:
        raise RangeError(f"symbol id {int(batch.tokens.max())} >= table size {cfg.table_size}")
    dtype = params["embed.table"].dtype
    E = params["embed.table"]
    x = E[batch.tokens].astype(dtype).copy()

    patch_cache = None
    if batch.patch_pixels.shape[0]:
        pe, patch_cache = _patch_embed_fwd(params, cfg, batch.patch_pixels, dtype)
        pe = (
            pe
            + params["embed.pos_row"][batch.pos_row[batch.patch_b, batch.patch_t]]
            + params["embed.pos_col"][batch.pos_col[batch.patch_b, batch.patch_t]]
        )
        x[batch.patch_b, batch.patch_t] = pe  # overwrite, not add

    obs = batch.local_pos >= 0
    lp = np.clip(batch.local_pos, 0, cfg.local_pos_vocab - 1)
    x[obs] += params["embed.local"][lp[obs]]
    act = batch.local_pos == ACTION_POS
    x[act] += params["embed.action"]

    drop_cache = None
    if train and cfg.dropout > 0:
        x, drop_cache = layers.dropout_fwd(x, cfg.dropout, rng)
    cache = (batch, patch_cache, obs, lp, act, drop_cache)
    return x, cache


def embed_bwd(dx, cache, grads):
    batch, patch_cache, obs, lp, act, drop_cache = cache
    dx = layers.dropout_bwd(dx, drop_cache)
    grads["embed.action"] += dx[act].sum(0)
    np.add.at(grads["embed.local"], lp[obs], dx[obs])
    if patch_cache is not None:
        dpe = dx[batch.patch_b, batch.patch_t]
        np.add.at(grads["embed.pos_row"], batch.pos_row[batch.patch_b, batch.patch_t], dpe)
        np.add.at(grads["embed.pos_col"], batch.pos_col[batch.patch_b, batch.patch_t], dpe)
        _patch_embed_bwd(dpe, patch_cache, grads)
        dx = dx.copy()
        dx[batch.patch_b, batch.patch_t] = 0.0  # patch slots bypass the table
    np.add.at(grads["embed.table"], batch.tokens, dx)


# ---------------------------------------------------------------------------
# transformer blocks

def _ffn_fwd(params, i, x, train, dropout, rng):
    h1, c1 = layers.linear_fwd(x, params[f"b{i}.ffn.W1"], params[f"b{i}.ffn.b1"])
    h2, c2 = layers.linear_fwd(x, params[f"b{i}.ffn.W2"], params[f"b{i}.ffn.b2"])
    a, ca = layers.gelu_fwd(h1)
    prod = a * h2
    y, c3 = layers.linear_fwd(prod, params[f"b{i}.ffn.W3"], params[f"b{i}.ffn.b3"])
    y, cd = layers.dropout_fwd(y, dropout, rng) if train and dropout > 0 else (y, None)
    return y, (c1, c2, ca, a, h2, c3, cd)


def _ffn_bwd(dy, cache, params, i, grads):
    c1, c2, ca, a, h2, c3, cd = cache
    dy = layers.dropout_bwd(dy, cd)
    dprod, dW3, db3 = layers.linear_bwd(dy, c3)
    grads[f"b{i}.ffn.W3"] += dW3
    grads[f"b{i}.ffn.b3"] += db3
    da = dprod * h2
    dh2 = dprod * a
    dh1 = layers.gelu_bwd(da, ca)
    dx1, dW1, db1 = layers.linear_bwd(dh1, c1)
    dx2, dW2, db2 = layers.linear_bwd(dh2, c2)
    grads[f"b{i}.ffn.W1"] += dW1
    grads[f"b{i}.ffn.b1"] += db1
    grads[f"b{i}.ffn.W2"] += dW2
    grads[f"b{i}.ffn.b2"] += db2
    return dx1 + dx2


def _attn_params(params, i):
    return {
        "Wq": params[f"b{i}.attn.Wq"],
        "Wk": params[f"b{i}.attn.Wk"],
        "Wv": params[f"b{i}.attn.Wv"],
        "Wo": params[f"b{i}.attn.Wo"],
        "Wr": params[f"b{i}.attn.Wr"],
        "u": params[f"b{i}.attn.u"],
        "v": params[f"b{i}.attn.v"],
    }


def blocks_fwd(params, cfg: ModelConfig, x, mems=None, train=False, rng=None):
    """Run all blocks. mems is a list of per-block cached hidden states
    (inputs to each block from earlier segments); returns updated memory.
    """
    caches = []
    new_mems = []
    use_mem = mems is not None
    for i in range(cfg.blocks):
        mem = mems[i] if use_mem and i < len(mems) else None
        if use_mem:
            cat = np.concatenate([mem, x], axis=1) if mem is not None and mem.shape[1] else x
            new_mems.append(cat[:, -cfg.memory_len :].copy())
        else:
            cat = x
        M = cat.shape[1] - x.shape[1]
        if cfg.norm_placement == "pre":
            ln, c_ln = layers.layernorm_fwd(cat, params[f"b{i}.ln1.g"], params[f"b{i}.ln1.b"])
            a, c_at = attention.attn_fwd(ln[:, M:], ln, _attn_params(params, i), cfg.heads)
            a, c_d1 = (
                layers.dropout_fwd(a, cfg.dropout, rng) if train and cfg.dropout > 0 else (a, None)
            )
            x1 = x + a
            ln2, c_ln2 = layers.layernorm_fwd(x1, params[f"b{i}.ln2.g"], params[f"b{i}.ln2.b"])
            f, c_ff = _ffn_fwd(params, i, ln2, train, cfg.dropout, rng)
            x = x1 + f
            caches.append(("pre", M, c_ln, c_at, c_d1, c_ln2, c_ff))
        else:
            a, c_at = attention.attn_fwd(x, cat, _attn_params(params, i), cfg.heads)
            a, c_d1 = (
                layers.dropout_fwd(a, cfg.dropout, rng) if train and cfg.dropout > 0 else (a, None)
            )
            x1, c_ln = layers.layernorm_fwd(x + a, params[f"b{i}.ln1.g"], params[f"b{i}.ln1.b"])
            f, c_ff = _ffn_fwd(params, i, x1, train, cfg.dropout, rng)
            x, c_ln2 = layers.layernorm_fwd(x1 + f, params[f"b{i}.ln2.g"], params[f"b{i}.ln2.b"])
            caches.append(("post", M, c_ln, c_at, c_d1, c_ln2, c_ff))
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite activations after block {i}")
    if cfg.norm_placement == "pre":
        x, c_f = layers.layernorm_fwd(x, params["final.g"], params["final.b"])
        caches.append(c_f)
    return x, caches, (new_mems if use_mem else None)


def blocks_bwd(dh, caches, params, cfg: ModelConfig, grads):
    if cfg.norm_placement == "pre":
        dh, dg, db = layers.layernorm_bwd(dh, caches[-1])
        grads["final.g"] += dg
        grads["final.b"] += db
        block_caches = caches[:-1]
    else:
        block_caches = caches
    for i in reversed(range(cfg.blocks)):
        kind, M, c_ln, c_at, c_d1, c_ln2, c_ff = block_caches[i]
        if kind == "pre":
            df = dh
            dln2 = _ffn_bwd(df, c_ff, params, i, grads)
            dx1, dg, db = layers.layernorm_bwd(dln2, c_ln2)
            grads[f"b{i}.ln2.g"] += dg
            grads[f"b{i}.ln2.b"] += db
            dx1 = dx1 + dh
            da = layers.dropout_bwd(dx1, c_d1)
            dq, dhm, agr = attention.attn_bwd(da, c_at)
            for k, v in agr.items():
                grads[f"b{i}.attn.{k}"] += v
            dcat = dhm
            dcat[:, M:] += dq
            dln_in, dg, db = layers.layernorm_bwd(dcat, c_ln)
            grads[f"b{i}.ln1.g"] += dg
            grads[f"b{i}.ln1.b"] += db
            dh = dx1 + dln_in[:, M:]
        else:
            dx2, dg, db = layers.layernorm_bwd(dh, c_ln2)
            grads[f"b{i}.ln2.g"] += dg
            grads[f"b{i}.ln2.b"] += db
            dx1 = _ffn_bwd(dx2, c_ff, params, i, grads) + dx2
            dxa, dg, db = layers.layernorm_bwd(dx1, c_ln)
            grads[f"b{i}.ln1.g"] += dg
            grads[f"b{i}.ln1.b"] += db
            da = layers.dropout_bwd(dxa, c_d1)
            dq, dhm, agr = attention.attn_bwd(da, c_at)
            for k, v in agr.items():
                grads[f"b{i}.attn.{k}"] += v
            dh = dxa + dq + dhm[:, M:]
    return dh


# ---------------------------------------------------------------------------
# public forward / loss / gradients

def zero_grads(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def forward(params, cfg: ModelConfig, x_embedded, memory=None):
    """Full-vocabulary logits for an embedded input. Returns (logits, memory).

    Logits at position i depend only on positions <= i and on memory.
    """
    mems = memory if memory is not None else [None] * cfg.blocks
    h, _, new_mems = blocks_fwd(params, cfg, x_embedded, mems=mems)
    logits = h @ head_matrix(params, cfg).T
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits")
    return logits, new_mems


def loss_masked_nll(logits, targets, mask):
    """Summed negative log likelihood over masked positions (teacher forcing).

    targets[l] is the symbol expected at position l+1; mask selects which
    predictions contribute. All-zero masks give 0.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    sel = mask.astype(bool) & (targets >= 0)
    if not sel.any():
        import warnings

        warnings.warn("loss_masked_nll: all-zero loss mask", stacklevel=2)
        return 0.0
    lm = logits[sel]
    tm = targets[sel]
    zmax = lm.max(-1, keepdims=True)
    logz = np.log(np.exp(lm - zmax).sum(-1)) + zmax[:, 0]
    return float((logz - lm[np.arange(len(tm)), tm]).sum())


def loss_and_grads(params, cfg: ModelConfig, batch: Batch, rng=None, train=True):
    """Masked NLL and gradients for every trainable tensor.

    The output head is applied only at supervised positions, so the full
    logits tensor is never materialized.
    """
    x, ec = embed_fwd(params, cfg, batch, train=train, rng=rng)
    h, caches, _ = blocks_fwd(params, cfg, x, mems=None, train=train, rng=rng)
    E = head_matrix(params, cfg)

    sel = batch.loss_mask.astype(bool) & (batch.targets >= 0)
    grads = zero_grads(params)
    if not sel.any():
        return 0.0, grads
    mb, mt = np.nonzero(sel)
    hm = h[mb, mt]
    tm = batch.targets[mb, mt]
    logits = hm @ E.T
    zmax = logits.max(-1, keepdims=True)
    ez = np.exp(logits - zmax)
    zsum = ez.sum(-1, keepdims=True)
    loss = float((np.log(zsum[:, 0]) + zmax[:, 0] - logits[np.arange(len(tm)), tm]).sum())
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")

    dlogits = ez / zsum
    dlogits[np.arange(len(tm)), tm] -= 1.0
    dh_sel = dlogits @ E
    dE_head = dlogits.T @ hm

    dh = np.zeros_like(h)
    dh[mb, mt] = dh_sel
    dx = blocks_bwd(dh, caches, params, cfg, grads)
    embed_bwd(dx, ec, grads)
    head_name = "embed.table" if cfg.tied_embedding else "head.W"
    grads[head_name] += dE_head
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {k}")
    return loss, grads


# ---------------------------------------------------------------------------
# decoding

def valid_token_ids(action_spec, slot):
    if isinstance(action_spec, DiscreteAction):
        return np.arange(action_spec.n)
    if isinstance(action_spec, ContinuousAction):
        return np.arange(vocab.CONT_LO, vocab.CONT_HI)
    if isinstance(action_spec, TextAction):
        return np.arange(vocab.TEXT_LO, vocab.TEXT_HI)
    raise SpecMismatchError(f"unknown action spec {type(action_spec)}")


def action_slot_count(action_spec):
    if isinstance(action_spec, DiscreteAction):
        return action_spec.slots
    if isinstance(action_spec, ContinuousAction):
        return action_spec.dim
    return action_spec.max_tokens


def _embed_stream(params, cfg, stream: TokenStream):
    return embed_fwd(params, cfg, stream_to_batch(stream), train=False)[0]


def _action_token_stream(tok):
    return TokenStream(
        kinds=np.zeros(1, np.uint8),
        tokens=np.array([tok], np.int32),
        loss_mask=np.ones(1, np.uint8),
        local_pos=np.array([ACTION_POS], np.int32),
        patches=[None],
        pos_row=np.full(1, -1, np.int16),
        pos_col=np.full(1, -1, np.int16),
    )


def decode_step(params, cfg, context: TokenStream, action_spec, strategy, memory, rng=None,
                stop_token=None):
    """Consume new context entries and emit one action's tokens.

    strategy is "greedy" or ("sample", temperature). Each slot's distribution
    is renormalized over the slot's valid token set; greedy breaks ties toward
    the lowest token id. Returns (tokens, memory).
    """
    if memory is None:
        memory = [np.zeros((1, 0, cfg.width), params["embed.table"].dtype)] * cfg.blocks
    x = _embed_stream(params, cfg, context)
    h, _, memory = blocks_fwd(params, cfg, x, mems=memory)
    E = head_matrix(params, cfg)
    out = []
    for slot in range(action_slot_count(action_spec)):
        valid = valid_token_ids(action_spec, slot)
        if valid.size == 0:
            raise SpecMismatchError("empty valid token set")
        logits = h[0, -1] @ E[valid].T
        if strategy == "greedy":
            tok = int(valid[int(np.argmax(logits))])
        else:
            _, temp = strategy
            p = layers.softmax(logits / max(temp, 1e-8))
            tok = int(valid[rng.choice(len(valid), p=p)])
        out.append(tok)
        # feed the chosen token so the returned memory covers the whole action
        x = _embed_stream(params, cfg, _action_token_stream(tok))
        h, _, memory = blocks_fwd(params, cfg, x, mems=memory)
        if stop_token is not None and tok == stop_token:
            break
    return out, memory
