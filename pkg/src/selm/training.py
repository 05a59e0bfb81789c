"""Subspace memorization: optimize the d-dimensional vector whose Fastfood
projection perturbs the frozen full parameter vector, until greedy decoding
reproduces every message chunk.

Update rule per epoch: pull the full-space loss gradient back through the
projection adjoint, add the active regularizer gradient, clip the combined
gradient to a maximum L2 norm, and apply an AdamW step with zero weight
decay under a linearly decaying learning rate (floor 0 after
lr_decay_epochs).

Convergence is checked by actually greedy-decoding every chunk.  Because
the ciphertext ships 32-bit floats, the check runs on the vector rounded
through float32, so a converged result survives serialization exactly.  A
free teacher-forced argmax check (equivalent to greedy success; see
`lm.predicts_all`) gates the expensive decode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import lm
from .projection import ProjectionSpec, project, project_adjoint


class ConfigurationError(ValueError):
    """Dimension or parameter mismatch between config, projection, model."""


@dataclass(frozen=True)
class RegularizerConfig:
    """none | l2_target(alpha) | wasserstein(sigma), with a shared linear
    lambda warmup from 0 to lambda_max over warmup_epochs."""

    kind: str = "none"
    alpha: float = 0.0
    sigma: float = 0.0
    lambda_max: float = 0.0
    warmup_epochs: int = 1

    def __post_init__(self):
        if self.kind not in ("none", "l2_target", "wasserstein"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be >= 0")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")
        if self.kind == "wasserstein" and self.sigma <= 0:
            raise ValueError("wasserstein regularizer needs sigma > 0")


@dataclass(frozen=True)
class TrainConfig:
    d: int
    lr0: float = 3e-3
    lr_decay_epochs: int = 2000
    grad_clip_l2: float = 1e5
    max_epochs: int = 10000
    verify_every: int = 1
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.verify_every < 1:
            raise ValueError("verify_every must be >= 1")


@dataclass(frozen=True)
class MemorizationResult:
    theta_d_star: np.ndarray  # float32, length d
    epochs_used: int
    converged: bool
    final_loss: float


def normal_cdf(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF via the standard library's erf (IEEE double
    accuracy, far inside the 1e-7 absolute budget)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.array([math.erf(v) for v in x.ravel() / math.sqrt(2.0)])
    return (0.5 * (1.0 + out)).reshape(x.shape)


def lambda_schedule(epoch: int, lambda_max: float, warmup_epochs: int) -> float:
    """Linear ramp: 0 at epoch 0, lambda_max from warmup_epochs onward."""
    if warmup_epochs < 1:
        raise ValueError("warmup_epochs must be >= 1")
    return lambda_max * min(1.0, epoch / warmup_epochs)


def l2_target_penalty(theta_d: np.ndarray, alpha: float, lam: float):
    """Penalty lam * | ||theta||_2 - alpha | and its (sub)gradient.

    At theta = 0 the subgradient 0 is chosen, so the very first update of a
    zero-initialized run is driven by the loss alone.
    """
    if lam < 0 or alpha < 0:
        raise ValueError("lam and alpha must be >= 0")
    theta_d = np.asarray(theta_d, dtype=np.float64)
    norm = float(np.linalg.norm(theta_d))
    value = lam * abs(norm - alpha)
    if norm == 0.0:
        return value, np.zeros_like(theta_d)
    grad = lam * math.copysign(1.0, norm - alpha) * theta_d / norm
    return value, grad


def wasserstein_penalty(theta_d: np.ndarray, sigma: float, lam: float):
    """Penalty lam * Omega, where Omega is the trapezoidal integral of the
    gap between the sorted values' empirical CDF (heights i/d) and the
    N(0, sigma^2) CDF, taken over the sorted abscissae.

    The gradient treats the sort permutation as locally constant and the
    ECDF heights as constants; ties keep their original order.
    """
    theta_d = np.asarray(theta_d, dtype=np.float64)
    d = theta_d.size
    if d < 2:
        raise ValueError("wasserstein penalty needs d >= 2")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    order = np.argsort(theta_d, kind="stable")
    x = theta_d[order]
    ecdf = np.arange(d, dtype=np.float64) / d
    cdf = normal_cdf(x / sigma)
    gap = np.abs(ecdf - cdf)
    omega = float(np.trapezoid(gap, x))

    widths = x[1:] - x[:-1]
    w = np.zeros(d)
    w[1:] += 0.5 * widths
    w[:-1] += 0.5 * widths
    pdf = np.exp(-0.5 * (x / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
    dgap = -np.sign(ecdf - cdf) * pdf * w
    pair = 0.5 * (gap[:-1] + gap[1:])
    dgap[1:] += pair
    dgap[:-1] -= pair

    grad = np.empty(d)
    grad[order] = dgap
    return lam * omega, lam * grad


def _regularizer_terms(reg: RegularizerConfig, theta_d: np.ndarray, epoch: int):
    if reg.kind == "none" or reg.lambda_max == 0.0:
        return 0.0, None
    lam = lambda_schedule(epoch, reg.lambda_max, reg.warmup_epochs)
    if lam == 0.0:
        return 0.0, None
    if reg.kind == "l2_target":
        return l2_target_penalty(theta_d, reg.alpha, lam)
    return wasserstein_penalty(theta_d, reg.sigma, lam)


def _decodes_all(model_config, theta_D, examples) -> bool:
    params = lm.ModelParams(model_config, theta_D)
    for ex in examples:
        out = lm.greedy_decode(model_config, params, ex.prompt, ex.chunk.size)
        if not np.array_equal(out, ex.chunk):
            return False
    return True


def memorize(
    config: TrainConfig,
    model_config: lm.ModelConfig,
    theta_D0: lm.ModelParams,
    spec: ProjectionSpec,
    examples,
) -> MemorizationResult:
    """Train theta^d from the zero vector until every chunk greedy-decodes
    exactly, or the epoch budget runs out.

    Deterministic: identical inputs give a bit-identical result.  The
    returned vector is float32; convergence is verified on that rounded
    vector so it survives the ciphertext encoding.
    """
    if spec.d != config.d:
        raise ConfigurationError(f"projection d={spec.d} != config d={config.d}")
    if spec.D != theta_D0.flat.size:
        raise ConfigurationError(f"projection D={spec.D} != model D={theta_D0.flat.size}")
    if not examples:
        raise ConfigurationError("examples must be nonempty")

    theta = np.zeros(config.d, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8

    def confirmed(vec: np.ndarray) -> bool:
        # Authoritative stopping criterion on the float32-rounded vector.
        theta32 = vec.astype(np.float32)
        candidate = theta_D0.flat + project(spec, theta32.astype(np.float64))
        cand_params = lm.ModelParams(model_config, candidate)
        return lm.predicts_all(model_config, cand_params, examples) and _decodes_all(
            model_config, candidate, examples
        )

    loss = math.inf
    for step in range(1, config.max_epochs + 1):
        theta_D = theta_D0.flat + project(spec, theta)
        params = lm.ModelParams(model_config, theta_D)
        data_loss, grad_D, match = lm._loss_grad_match(model_config, params, examples)
        epochs_done = step - 1  # theta has seen this many updates so far
        reg_value, reg_grad = _regularizer_terms(config.regularizer, theta, epochs_done)
        loss = data_loss + reg_value

        # `match` is the free teacher-forced equivalent of greedy success at
        # the current theta; only then pay for the rounded decode check.
        if match and epochs_done % config.verify_every == 0 and confirmed(theta):
            return MemorizationResult(theta.astype(np.float32), epochs_done, True, loss)

        grad = project_adjoint(spec, grad_D)
        if reg_grad is not None:
            grad = grad + reg_grad
        norm = float(np.linalg.norm(grad))
        if norm > config.grad_clip_l2:
            grad = grad * (config.grad_clip_l2 / norm)

        lr = config.lr0 * max(0.0, 1.0 - step / config.lr_decay_epochs)
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad**2
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)

    if confirmed(theta):
        return MemorizationResult(
            theta.astype(np.float32), config.max_epochs, True, loss
        )
    return MemorizationResult(theta.astype(np.float32), config.max_epochs, False, loss)
