"""The cipher proper: keys, per-message key derivation, prompt and chunk
construction, encrypt/decrypt orchestration, and the ciphertext wire format.

Encryption samples a fresh 64-bit nonce x, derives a per-message key
k' = HMAC-SHA256(k, LE64(x)), builds the Fastfood projection from k', and
trains the subspace vector until greedy decoding reproduces the message.
The ciphertext carries the nonce, the cleartext prompts with per-chunk
token counts, and the float32 subspace vector; decryption rebuilds the
same projection from (k, x) and replays greedy decoding.

Decryption with the wrong key is not detected: the decode simply produces
unrelated bytes.  The cipher provides confidentiality only, no integrity.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
import struct
import uuid
from dataclasses import dataclass
from random import Random

import numpy as np

from . import lm, training
from .projection import build_projection, project

CIPHERTEXT_MAGIC = b"SELM"
CIPHERTEXT_VERSION = 1
PROMPT_LEN = 36  # canonical UUID string

FLAG_BY_KIND = {"none": 0, "l2_target": 1, "wasserstein": 2}
KIND_BY_FLAG = {v: k for k, v in FLAG_BY_KIND.items()}


class EncryptionBudgetExceeded(RuntimeError):
    """Memorization did not converge within max_epochs; raise d or the
    epoch budget and retry."""


class ModelMismatch(ValueError):
    """Ciphertext was produced against a different model checkpoint."""


class FormatError(ValueError):
    """Malformed ciphertext bytes."""


@dataclass(frozen=True)
class SecretKey:
    data: bytes

    def __post_init__(self):
        if len(self.data) != 32:
            raise ValueError("secret key must be exactly 32 bytes")


def keygen() -> SecretKey:
    """32 bytes from the OS entropy source."""
    return SecretKey(secrets.token_bytes(32))


def derive_key(key: SecretKey, nonce_x: int) -> bytes:
    """Per-message key k' = HMAC-SHA256(k, LE64(x))."""
    msg = struct.pack("<Q", nonce_x & 0xFFFFFFFFFFFFFFFF)
    return hmac.new(key.data, msg, hashlib.sha256).digest()


def make_prompts(n_chunks: int, rng: Random) -> list:
    """Fresh version-4 UUIDs in canonical 36-byte ASCII form, pairwise
    distinct within one message."""
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    prompts = []
    seen = set()
    while len(prompts) < n_chunks:
        p = str(uuid.UUID(bytes=rng.randbytes(16), version=4)).encode("ascii")
        if p not in seen:
            seen.add(p)
            prompts.append(p)
    return prompts


def chunk_tokens(message_tokens, context_len: int, prompt_len: int) -> list:
    """Greedy left-to-right split into pieces of at most
    context_len - prompt_len tokens; the pieces concatenate back to the
    input."""
    if context_len <= prompt_len:
        raise ValueError("context_len must exceed prompt_len")
    message_tokens = np.asarray(message_tokens, dtype=np.int64)
    cap = context_len - prompt_len
    return [message_tokens[i : i + cap] for i in range(0, len(message_tokens), cap)]


@dataclass(frozen=True)
class Ciphertext:
    model_id: bytes            # 32-byte checkpoint hash
    d: int
    nonce_x: int               # 64-bit
    chunks: tuple              # ((prompt_bytes, token_count), ...)
    theta_d_star: np.ndarray   # float32, length d
    flags: int                 # regularizer tag

    def __post_init__(self):
        if len(self.model_id) != 32:
            raise ValueError("model_id must be 32 bytes")
        if self.theta_d_star.shape != (self.d,):
            raise ValueError("theta_d_star length must equal d")
        for prompt, count in self.chunks:
            if count < 1:
                raise ValueError("every chunk needs token_count >= 1")


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    out = bytearray()
    out += CIPHERTEXT_MAGIC
    out += struct.pack("<BB", CIPHERTEXT_VERSION, ct.flags)
    out += ct.model_id
    out += struct.pack("<IQH", ct.d, ct.nonce_x, len(ct.chunks))
    for prompt, count in ct.chunks:
        out += struct.pack("<H", len(prompt))
        out += prompt
        out += struct.pack("<I", count)
    out += np.asarray(ct.theta_d_star, dtype="<f4").tobytes()
    return bytes(out)


def deserialize_ciphertext(blob: bytes) -> Ciphertext:
    if blob[:4] != CIPHERTEXT_MAGIC:
        raise FormatError("not a ciphertext (bad magic)")
    version, flags = struct.unpack_from("<BB", blob, 4)
    if version != CIPHERTEXT_VERSION:
        raise FormatError(f"unsupported ciphertext version {version}")
    model_id = blob[6:38]
    d, nonce_x, n_chunks = struct.unpack_from("<IQH", blob, 38)
    pos = 52
    chunks = []
    for _ in range(n_chunks):
        (plen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        prompt = blob[pos : pos + plen]
        pos += plen
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        chunks.append((prompt, count))
    theta = np.frombuffer(blob, dtype="<f4", offset=pos, count=d).copy()
    if pos + 4 * d != len(blob):
        raise FormatError("trailing bytes after theta vector")
    return Ciphertext(bytes(model_id), d, nonce_x, tuple(chunks), theta, flags)


def build_examples(message: bytes, prompts, context_len: int):
    """Tokenize, chunk and prefix a message into training examples."""
    tokens = lm.tokenize(message)
    chunks = chunk_tokens(tokens, context_len, PROMPT_LEN)
    if len(prompts) != len(chunks):
        raise ValueError("one prompt per chunk required")
    return [
        lm.make_example(lm.tokenize(p), c) for p, c in zip(prompts, chunks)
    ]


def encrypt(
    key: SecretKey,
    message: bytes,
    model: lm.Checkpoint,
    train_config: training.TrainConfig,
    rng: Random | None = None,
) -> Ciphertext:
    """Encrypt by subspace memorization.

    Fresh nonce and prompts come from `rng` when given (reproducible runs)
    and from the OS entropy source otherwise.  Deterministic given
    (key, rng state, message, model, train_config).
    """
    if len(message) == 0:
        raise ValueError("message must be nonempty")
    if rng is None:
        nonce_x = secrets.randbits(64)
        prompt_rng = Random(secrets.randbits(128))
    else:
        nonce_x = rng.getrandbits(64)
        prompt_rng = rng

    key_prime = derive_key(key, nonce_x)
    spec = build_projection(key_prime, train_config.d, lm.n_params(model.config))

    tokens = lm.tokenize(message)
    n_chunks = len(chunk_tokens(tokens, model.config.context_len, PROMPT_LEN))
    prompts = make_prompts(n_chunks, prompt_rng)
    examples = build_examples(message, prompts, model.config.context_len)

    result = training.memorize(
        train_config, model.config, model.params, spec, examples
    )
    if not result.converged:
        raise EncryptionBudgetExceeded(
            f"no convergence within {train_config.max_epochs} epochs "
            f"(final loss {result.final_loss:.4f})"
        )
    chunks = tuple(
        (p, int(ex.chunk.size)) for p, ex in zip(prompts, examples)
    )
    return Ciphertext(
        model_id=model.model_id,
        d=train_config.d,
        nonce_x=nonce_x,
        chunks=chunks,
        theta_d_star=result.theta_d_star,
        flags=FLAG_BY_KIND[train_config.regularizer.kind],
    )


def decrypt(key: SecretKey, ct: Ciphertext, model: lm.Checkpoint) -> bytes:
    """Rebuild the secret projection from (k, x) and greedy-decode every
    chunk.  A wrong key produces gibberish, not an error."""
    if ct.model_id != model.model_id:
        raise ModelMismatch("ciphertext was made with a different checkpoint")
    key_prime = derive_key(key, ct.nonce_x)
    spec = build_projection(key_prime, ct.d, lm.n_params(model.config))
    theta_D = model.params.flat + project(spec, ct.theta_d_star.astype(np.float64))
    params = lm.ModelParams(model.config, theta_D)
    pieces = []
    for prompt, count in ct.chunks:
        ids = lm.greedy_decode(model.config, params, lm.tokenize(prompt), count)
        pieces.append(ids)
    return lm.detokenize(np.concatenate(pieces))
