"""Compact decoder-only autoregressive transformer over a byte vocabulary.

The model is a pre-norm GPT-style stack with multi-head causal attention,
a GELU MLP, a final layer norm and an output head tied to the input
embedding.  All parameters live in one flat float64 vector with a fixed,
documented layout (see `param_layout`), and gradients with respect to that
flat vector are computed by hand-written reverse-mode passes.

Reproducibility: every reduction (matmul accumulation, softmax sums, the
sequential loop over batch examples) runs in a fixed order with no
intra-call randomness, so repeated forward/backward calls on identical
inputs produce bit-identical results on one machine.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

CHECKPOINT_MAGIC = b"SLMW"
CHECKPOINT_VERSION = 1

_NEG_INF = -1e30
_GELU_C = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-5


class TokenError(ValueError):
    """Token id outside the byte vocabulary."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    context_len: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256

    def __post_init__(self):
        if self.vocab_size != 256:
            raise ValueError("vocab_size must be 256 (byte-level)")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


def tokenize(data: bytes) -> np.ndarray:
    """Bytes to token ids; ids are the byte values."""
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    """Token ids back to bytes; inverse of `tokenize` on all byte strings."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() > 255):
        raise TokenError("token ids must be in [0, 255]")
    return ids.astype(np.uint8).tobytes()


@lru_cache(maxsize=None)
def param_layout(config: ModelConfig):
    """Fixed (name, shape, offset) layout of the flat parameter vector.

    Order: token embedding, positional embedding, then per layer the
    attention-norm scale/shift, fused QKV projection, attention output
    projection, MLP-norm scale/shift, MLP in/out projections, and finally
    the output-norm scale/shift.  The output head reuses the token
    embedding (weight tying), so it has no entry of its own.
    """
    dm, dff = config.d_model, config.d_ff
    entries = [
        ("tok_emb", (config.vocab_size, dm)),
        ("pos_emb", (config.context_len, dm)),
    ]
    for i in range(config.n_layers):
        entries += [
            (f"h{i}.ln1.g", (dm,)),
            (f"h{i}.ln1.b", (dm,)),
            (f"h{i}.attn.w_qkv", (dm, 3 * dm)),
            (f"h{i}.attn.b_qkv", (3 * dm,)),
            (f"h{i}.attn.w_out", (dm, dm)),
            (f"h{i}.attn.b_out", (dm,)),
            (f"h{i}.ln2.g", (dm,)),
            (f"h{i}.ln2.b", (dm,)),
            (f"h{i}.mlp.w_in", (dm, dff)),
            (f"h{i}.mlp.b_in", (dff,)),
            (f"h{i}.mlp.w_out", (dff, dm)),
            (f"h{i}.mlp.b_out", (dm,)),
        ]
    entries += [("ln_f.g", (dm,)), ("ln_f.b", (dm,))]

    layout = []
    offset = 0
    for name, shape in entries:
        layout.append((name, shape, offset))
        offset += int(np.prod(shape))
    return tuple(layout), offset


def n_params(config: ModelConfig) -> int:
    """Total parameter count D, a pure function of the config."""
    return param_layout(config)[1]


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector theta^D for a given config."""

    config: ModelConfig
    flat: np.ndarray

    def __post_init__(self):
        if self.flat.shape != (n_params(self.config),):
            raise ValueError(
                f"flat must have length {n_params(self.config)}, "
                f"got {self.flat.shape}"
            )

    def view(self) -> dict:
        """Named views into the flat vector (no copies)."""
        layout, _ = param_layout(self.config)
        return {
            name: self.flat[off : off + int(np.prod(shape))].reshape(shape)
            for name, shape, off in layout
        }


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded random initialization: N(0, 0.02^2) embeddings and weights,
    N(0, 0.01^2) positions, zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(n_params(config), dtype=np.float64)
    params = ModelParams(config, flat)
    for name, arr in params.view().items():
        if name == "pos_emb":
            arr[:] = rng.normal(0.0, 0.01, size=arr.shape)
        elif name.endswith(".g"):
            arr[:] = 1.0
        elif name.endswith(".b") or name.startswith("h") and ".b_" in name:
            pass  # zeros
        elif arr.ndim == 2 or name == "tok_emb":
            arr[:] = rng.normal(0.0, 0.02, size=arr.shape)
    return params


@dataclass(frozen=True)
class TrainingExample:
    """Prompt plus message chunk; the loss mask is true exactly on chunk
    positions (which therefore always have left context)."""

    tokens: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        t, m = self.tokens, self.loss_mask
        if t.shape != m.shape or t.ndim != 1:
            raise ValueError("tokens and loss_mask must be equal-length 1-D")
        if not m.any():
            raise ValueError("loss_mask must mark at least one position")
        if m[0]:
            raise ValueError("position 0 cannot be a loss position")
        first = int(np.argmax(m))
        if not m[first:].all():
            raise ValueError("loss positions must form a contiguous suffix")

    @property
    def prompt(self) -> np.ndarray:
        return self.tokens[~self.loss_mask]

    @property
    def chunk(self) -> np.ndarray:
        return self.tokens[self.loss_mask]


def make_example(prompt_ids, chunk_ids) -> TrainingExample:
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    chunk_ids = np.asarray(chunk_ids, dtype=np.int64)
    if prompt_ids.size == 0:
        raise ValueError("prompt must be nonempty")
    tokens = np.concatenate([prompt_ids, chunk_ids])
    mask = np.zeros(tokens.size, dtype=bool)
    mask[prompt_ids.size :] = True
    return TrainingExample(tokens, mask)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_bwd(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(dy, x, t):
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, n_heads):
    L, dm = x.shape
    return x.reshape(L, n_heads, dm // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    H, L, dh = x.shape
    return x.transpose(1, 0, 2).reshape(L, H * dh)


def _forward(config: ModelConfig, p: dict, ids: np.ndarray):
    """Run the stack on one token sequence; returns logits and the
    activation cache needed for the backward pass."""
    L = ids.size
    dh = config.d_model // config.n_heads
    scale = 1.0 / math.sqrt(dh)
    causal = np.triu(np.full((L, L), _NEG_INF), k=1)

    x = p["tok_emb"][ids] + p["pos_emb"][:L]
    layers = []
    for i in range(config.n_layers):
        x0 = x
        a1, ln1c = _layernorm(x0, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
        qkv = a1 @ p[f"h{i}.attn.w_qkv"] + p[f"h{i}.attn.b_qkv"]
        q = _split_heads(qkv[:, : config.d_model], config.n_heads)
        k = _split_heads(
            qkv[:, config.d_model : 2 * config.d_model], config.n_heads
        )
        v = _split_heads(qkv[:, 2 * config.d_model :], config.n_heads)
        att = _softmax(q @ k.transpose(0, 2, 1) * scale + causal)
        om = _merge_heads(att @ v)
        x1 = x0 + om @ p[f"h{i}.attn.w_out"] + p[f"h{i}.attn.b_out"]
        a2, ln2c = _layernorm(x1, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
        h = a2 @ p[f"h{i}.mlp.w_in"] + p[f"h{i}.mlp.b_in"]
        hg, tanh_c = _gelu(h)
        x = x1 + hg @ p[f"h{i}.mlp.w_out"] + p[f"h{i}.mlp.b_out"]
        layers.append((a1, ln1c, q, k, v, att, om, ln2c, a2, h, hg, tanh_c))
    xf, lnfc = _layernorm(x, p["ln_f.g"], p["ln_f.b"])
    logits = xf @ p["tok_emb"].T
    return logits, (ids, layers, xf, lnfc, scale)


def _backward(config: ModelConfig, p: dict, cache, dlogits, grads: dict):
    ids, layers, xf, lnfc, scale = cache

    grads["tok_emb"] += dlogits.T @ xf
    dxf = dlogits @ p["tok_emb"]
    dx, dg, db = _layernorm_bwd(dxf, p["ln_f.g"], lnfc)
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for i in reversed(range(config.n_layers)):
        a1, ln1c, q, k, v, att, om, ln2c, a2, h, hg, tanh_c = layers[i]
        # MLP block
        grads[f"h{i}.mlp.w_out"] += hg.T @ dx
        grads[f"h{i}.mlp.b_out"] += dx.sum(axis=0)
        dh = _gelu_bwd(dx @ p[f"h{i}.mlp.w_out"].T, h, tanh_c)
        grads[f"h{i}.mlp.w_in"] += a2.T @ dh
        grads[f"h{i}.mlp.b_in"] += dh.sum(axis=0)
        da2 = dh @ p[f"h{i}.mlp.w_in"].T
        dx1_ln, dg, db = _layernorm_bwd(da2, p[f"h{i}.ln2.g"], ln2c)
        grads[f"h{i}.ln2.g"] += dg
        grads[f"h{i}.ln2.b"] += db
        dx1 = dx + dx1_ln
        # attention block
        grads[f"h{i}.attn.w_out"] += om.T @ dx1
        grads[f"h{i}.attn.b_out"] += dx1.sum(axis=0)
        do = _split_heads(dx1 @ p[f"h{i}.attn.w_out"].T, config.n_heads)
        datt = do @ v.transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = ds @ k * scale
        dk = ds.transpose(0, 2, 1) @ q * scale
        dqkv = np.concatenate(
            [_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=1
        )
        grads[f"h{i}.attn.w_qkv"] += a1.T @ dqkv
        grads[f"h{i}.attn.b_qkv"] += dqkv.sum(axis=0)
        da1 = dqkv @ p[f"h{i}.attn.w_qkv"].T
        dx0_ln, dg, db = _layernorm_bwd(da1, p[f"h{i}.ln1.g"], ln1c)
        grads[f"h{i}.ln1.g"] += dg
        grads[f"h{i}.ln1.b"] += db
        dx = dx1 + dx0_ln

    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][: ids.size] += dx


def _loss_grad_match(config: ModelConfig, params: ModelParams, batch):
    """Mean masked cross-entropy, its flat gradient, and whether the
    argmax prediction already equals the target at every masked position
    (the teacher-forced equivalent of greedy-decode success)."""
    if not batch:
        raise ValueError("batch must be nonempty")
    for ex in batch:
        if ex.tokens.size > config.context_len:
            raise ValueError("example exceeds context_len")

    p = params.view()
    grad_flat = np.zeros_like(params.flat)
    grads = ModelParams(config, grad_flat).view()

    n_masked = sum(int(ex.loss_mask.sum()) for ex in batch)
    loss_sum = 0.0
    match = True
    for ex in batch:
        logits, cache = _forward(config, p, ex.tokens)
        tpos = np.nonzero(ex.loss_mask)[0]
        rows = logits[tpos - 1]
        targets = ex.tokens[tpos]
        if not np.array_equal(rows.argmax(axis=1), targets):
            match = False
        m = rows.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=1))
        loss_sum += float((lse - rows[np.arange(tpos.size), targets]).sum())

        dlogits = np.zeros_like(logits)
        soft = _softmax(rows)
        soft[np.arange(tpos.size), targets] -= 1.0
        dlogits[tpos - 1] = soft / n_masked
        _backward(config, p, cache, dlogits, grads)

    return loss_sum / n_masked, grad_flat, match


def forward_loss(config: ModelConfig, params: ModelParams, batch):
    """Masked next-token cross-entropy and d loss / d flat."""
    loss, grad, _ = _loss_grad_match(config, params, batch)
    return loss, grad


def predicts_all(config: ModelConfig, params: ModelParams, batch) -> bool:
    """Forward-only check that every masked target is the argmax choice.

    Equivalent to greedy decoding reproducing every chunk: if each target
    wins the argmax given the true prefix, induction over positions gives
    the same context greedy decoding sees, and conversely.
    """
    p = params.view()
    for ex in batch:
        logits, _ = _forward(config, p, ex.tokens)
        tpos = np.nonzero(ex.loss_mask)[0]
        preds = logits[tpos - 1].argmax(axis=1)
        if not np.array_equal(preds, ex.tokens[tpos]):
            return False
    return True


def greedy_decode(
    config: ModelConfig, params: ModelParams, prompt, n_tokens: int
) -> np.ndarray:
    """Generate exactly n_tokens ids, taking the argmax logit each step;
    ties resolve to the lowest token id."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size == 0 and n_tokens > 0:
        raise ValueError("prompt must be nonempty")
    if prompt.size + n_tokens > config.context_len:
        raise ValueError("prompt plus n_tokens exceeds context_len")
    p = params.view()
    tokens = prompt.copy()
    out = np.empty(n_tokens, dtype=np.int64)
    for i in range(n_tokens):
        logits, _ = _forward(config, p, tokens)
        nxt = int(logits[-1].argmax())
        out[i] = nxt
        tokens = np.append(tokens, nxt)
    return out


def pretrain(
    config: ModelConfig,
    corpus: bytes,
    steps: int,
    seed: int,
    *,
    batch_size: int = 8,
    lr: float = 1e-3,
    grad_clip: float = 1.0,
) -> ModelParams:
    """Next-token training on random corpus windows with Adam.

    steps = 0 returns the seeded random initialization unchanged.  The run
    is a pure function of (config, corpus, steps, seed).
    """
    if len(corpus) == 0:
        raise ValueError("corpus must be nonempty")
    params = init_params(config, seed)
    if steps == 0:
        return params
    window = min(config.context_len, len(corpus))
    if window < 2:
        raise ValueError("corpus too short to form next-token windows")
    rng = np.random.default_rng(seed + 1)
    data = tokenize(corpus)

    flat = params.flat
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, steps + 1):
        starts = rng.integers(0, len(corpus) - window + 1, size=batch_size)
        batch = []
        for s in starts:
            toks = data[s : s + window]
            mask = np.ones(window, dtype=bool)
            mask[0] = False
            batch.append(TrainingExample(toks, mask))
        _, grad, _ = _loss_grad_match(config, params, batch)
        norm = float(np.linalg.norm(grad))
        if norm > grad_clip:
            grad *= grad_clip / norm
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad**2
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        flat -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


def corpus_loss(config: ModelConfig, params: ModelParams, corpus: bytes, seed: int, n_windows: int = 16) -> float:
    """Mean next-token loss over seeded random corpus windows."""
    rng = np.random.default_rng(seed)
    window = min(config.context_len, len(corpus))
    data = tokenize(corpus)
    batch = []
    for s in rng.integers(0, len(corpus) - window + 1, size=n_windows):
        toks = data[s : s + window]
        mask = np.ones(window, dtype=bool)
        mask[0] = False
        batch.append(TrainingExample(toks, mask))
    loss, _, _ = _loss_grad_match(config, params, batch)
    return loss


@dataclass(frozen=True)
class Checkpoint:
    """A loaded model: architecture, initial parameters and the 32-byte
    hash that ciphertexts bind to."""

    config: ModelConfig
    params: ModelParams
    model_id: bytes


def _encode_checkpoint(config: ModelConfig, params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    buf.write(
        struct.pack(
            "<6I",
            config.vocab_size,
            config.context_len,
            config.n_layers,
            config.n_heads,
            config.d_model,
            config.d_ff,
        )
    )
    buf.write(params.flat.astype("<f4").tobytes())
    return buf.getvalue()


def _decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<B", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    fields = struct.unpack_from("<6I", blob, 5)
    config = ModelConfig(*fields)
    flat = np.frombuffer(blob, dtype="<f4", offset=29).astype(np.float64)
    params = ModelParams(config, flat)
    return Checkpoint(config, params, hashlib.sha256(blob).digest())


def checkpoint_from_params(config: ModelConfig, params: ModelParams) -> Checkpoint:
    """Canonical in-memory checkpoint (parameters rounded through f32,
    model_id as if the bytes had been written to disk)."""
    return _decode_checkpoint(_encode_checkpoint(config, params))


def save_checkpoint(path, config: ModelConfig, params: ModelParams) -> bytes:
    blob = _encode_checkpoint(config, params)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).digest()


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return _decode_checkpoint(fh.read())
