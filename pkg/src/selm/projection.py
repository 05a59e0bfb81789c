"""Key-seeded Fastfood projection between the subspace R^d and the full
parameter space R^D.

Each power-of-two block applies V = H * G * Pi * H * B, where B is a random
sign diagonal, H the unnormalized Walsh-Hadamard matrix, Pi a random
permutation and G a random Gaussian diagonal.  No scaling matrix is applied;
the optimizer's learning rate absorbs the resulting gain.  ceil(D /
block_size) independent blocks are stacked to cover all D outputs, and the
final block is truncated.

All randomness is a pure function of a 32-byte key: the bit source is the
ChaCha20 keystream under that key with an all-zero nonce and the block
counter starting at zero.  Consumption order is fixed so that two parties
derive bitwise-identical operators:

  1. sign bits for every block (ceil(block_size / 8) bytes per block,
     bits taken most-significant first),
  2. Gaussian draws for every block (Box-Muller on consecutive pairs of
     little-endian 64-bit uniforms; both outputs of a pair are used),
  3. permutation draws for every block (descending Fisher-Yates, one
     little-endian 64-bit uniform reduced modulo the remaining range per
     swap).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms


class DimensionError(ValueError):
    """Vector length does not match the projection's dimensions."""


def next_pow2(n: int) -> int:
    """Smallest power of two >= n."""
    if n < 1:
        raise ValueError("n must be positive")
    return 1 << (n - 1).bit_length()


def fwht(x: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform along the last axis.

    Equivalent to multiplying by the Sylvester-ordered +-1 Hadamard matrix;
    the last-axis length must be a power of two.
    """
    n = x.shape[-1]
    if n & (n - 1):
        raise ValueError("fwht length must be a power of two")
    lead = x.shape[:-1]
    y = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, n)
    h = 1
    while h < n:
        y = y.reshape(y.shape[0], -1, 2, h)
        top = y[:, :, 0, :] + y[:, :, 1, :]
        bot = y[:, :, 0, :] - y[:, :, 1, :]
        y = np.concatenate((top[:, :, None, :], bot[:, :, None, :]), axis=2)
        h *= 2
    return y.reshape(*lead, n)


@dataclass(frozen=True)
class ProjectionSpec:
    """Frozen Fastfood operator; immutable and safe to share across threads."""

    d: int
    D: int
    block_size: int
    signs: np.ndarray        # (n_blocks, block_size), entries +-1.0
    gaussians: np.ndarray    # (n_blocks, block_size), N(0, 1) draws
    permutation: np.ndarray  # (n_blocks, block_size), bijection per row
    seed_material: bytes     # the 32-byte key that generated everything

    @property
    def n_blocks(self) -> int:
        return self.signs.shape[0]


def _keystream(key: bytes, nbytes: int) -> bytes:
    """ChaCha20 keystream under `key`, zero nonce, counter from zero."""
    enc = Cipher(algorithms.ChaCha20(key, bytes(16)), mode=None).encryptor()
    return enc.update(bytes(nbytes))


def _uniforms(raw: bytes) -> np.ndarray:
    """Little-endian u64 words mapped into (0, 1) as (u + 0.5) / 2^64."""
    u = np.frombuffer(raw, dtype="<u8")
    return (u.astype(np.float64) + 0.5) * 2.0 ** -64


def build_projection(key_prime: bytes, d: int, D: int) -> ProjectionSpec:
    """Derive the Fastfood operator for (d, D) from a 32-byte key."""
    if len(key_prime) != 32:
        raise ValueError("key_prime must be 32 bytes")
    if d < 1 or D < 1:
        raise ValueError("d and D must be positive")
    bs = next_pow2(d)
    n_blocks = -(-D // bs)

    sign_bytes_per_block = -(-bs // 8)
    n_gauss = n_blocks * bs
    n_pairs = -(-n_gauss // 2)
    n_perm_draws = n_blocks * (bs - 1)

    sign_total = n_blocks * sign_bytes_per_block
    gauss_total = n_pairs * 16
    perm_total = n_perm_draws * 8
    stream = _keystream(key_prime, sign_total + gauss_total + perm_total)

    bits = np.unpackbits(
        np.frombuffer(stream[:sign_total], dtype=np.uint8).reshape(
            n_blocks, sign_bytes_per_block
        ),
        axis=1,
    )[:, :bs]
    signs = (1.0 - 2.0 * bits).astype(np.float64)

    u = _uniforms(stream[sign_total : sign_total + gauss_total])
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * math.pi * u2
    pairs = np.empty(2 * n_pairs, dtype=np.float64)
    pairs[0::2] = r * np.cos(ang)
    pairs[1::2] = r * np.sin(ang)
    gaussians = pairs[:n_gauss].reshape(n_blocks, bs)

    draws = np.frombuffer(stream[sign_total + gauss_total :], dtype="<u8").tolist()
    permutation = np.empty((n_blocks, bs), dtype=np.int64)
    pos = 0
    for b in range(n_blocks):
        perm = list(range(bs))
        for i in range(bs - 1, 0, -1):
            j = draws[pos] % (i + 1)
            pos += 1
            perm[i], perm[j] = perm[j], perm[i]
        permutation[b] = perm

    return ProjectionSpec(
        d=d,
        D=D,
        block_size=bs,
        signs=signs,
        gaussians=gaussians,
        permutation=permutation,
        seed_material=bytes(key_prime),
    )


def project(spec: ProjectionSpec, theta_d: np.ndarray) -> np.ndarray:
    """Apply V: R^d -> R^D.  Linear and deterministic."""
    theta_d = np.asarray(theta_d, dtype=np.float64)
    if theta_d.shape != (spec.d,):
        raise DimensionError(
            f"expected length {spec.d} input, got shape {theta_d.shape}"
        )
    x = np.zeros(spec.block_size, dtype=np.float64)
    x[: spec.d] = theta_d
    t = spec.signs * x[None, :]
    t = fwht(t)
    t = np.take_along_axis(t, spec.permutation, axis=1)
    t = t * spec.gaussians
    t = fwht(t)
    return t.reshape(-1)[: spec.D]


def project_adjoint(spec: ProjectionSpec, grad_D: np.ndarray) -> np.ndarray:
    """Apply V^T: R^D -> R^d, satisfying <Vx, y> = <x, V^T y>."""
    grad_D = np.asarray(grad_D, dtype=np.float64)
    if grad_D.shape != (spec.D,):
        raise DimensionError(
            f"expected length {spec.D} input, got shape {grad_D.shape}"
        )
    padded = np.zeros(spec.signs.shape[0] * spec.block_size, dtype=np.float64)
    padded[: spec.D] = grad_D
    s = fwht(padded.reshape(spec.signs.shape))
    s = s * spec.gaussians
    scattered = np.zeros_like(s)
    np.put_along_axis(scattered, spec.permutation, s, axis=1)
    s = fwht(scattered)
    s = s * spec.signs
    return s[:, : spec.d].sum(axis=0)
