"""Training objectives: WGAN-GP, cycle/identity L1, their weighted sum, LSGAN."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import torch
import torch.nn.functional as F

Critic = Callable[[torch.Tensor], torch.Tensor]


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_gp: float = 10.0
    lambda_cyc: float = 100.0
    lambda_idty: float = 100.0

    def __post_init__(self):
        for name in ("lambda_gp", "lambda_cyc", "lambda_idty"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be non-negative")


def interpolate(real: torch.Tensor, generated: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """eps * real + (1 - eps) * generated with one eps per sample."""
    e = eps.view(-1, *([1] * (real.dim() - 1))).to(real.dtype)
    return e * real + (1 - e) * generated


def gradient_penalty(
    critic: Critic,
    real: torch.Tensor,
    generated: torch.Tensor,
    lambda_gp: float = 10.0,
    eps: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """lambda_gp * mean_n (||grad D(y_hat_n)||_2 - 1)^2, norm over each flattened sample.

    ``eps`` defaults to U[0,1] per sample drawn from ``generator``.
    The graph is kept so the penalty can be backpropagated into the critic.
    """
    if real.shape[0] == 0:
        raise LossError("empty batch")
    if eps is None:
        eps = torch.rand(real.shape[0], generator=generator)
    y_hat = interpolate(real.detach(), generated.detach(), eps).requires_grad_(True)
    out = critic(y_hat)
    grad = None
    if out.requires_grad:
        (grad,) = torch.autograd.grad(out.sum(), y_hat, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(y_hat)
    if not torch.isfinite(grad).all():
        raise LossError("non-finite critic gradient in gradient penalty")
    norms = grad.flatten(1).norm(2, dim=1)
    return lambda_gp * ((norms - 1.0) ** 2).mean()


def critic_loss(critic, generated, real, lambda_gp=10.0, eps=None, generator=None):
    """E[D(fake)] - E[D(real)] + GP; returns (total, gp)."""
    if generated.shape[0] == 0 or real.shape[0] == 0:
        raise LossError("empty batch")
    gp = gradient_penalty(critic, real, generated, lambda_gp, eps, generator)
    total = critic(generated.detach()).mean() - critic(real).mean() + gp
    return total, gp


def generator_adversarial_loss(critic, generated) -> torch.Tensor:
    if generated.shape[0] == 0:
        raise LossError("empty batch")
    return -critic(generated).mean()


def adversarial_loss(generated, real, critic, lambda_gp=10.0, eps=None, generator=None):
    """(generator_term, critic_term, gp_term) of the WGAN-GP objective."""
    crit, gp = critic_loss(critic, generated, real, lambda_gp, eps, generator)
    return generator_adversarial_loss(critic, generated), crit, gp


def l1_mean(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise LossError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).abs().mean()


def cycle_loss(x, x_roundtrip):
    return l1_mean(x, x_roundtrip)


def identity_loss(x, g_same_domain_out):
    return l1_mean(x, g_same_domain_out)


def combined_stage_loss(parts: Dict[str, torch.Tensor], weights: LossWeights = LossWeights()):
    """adv_ab + adv_ba + lambda_cyc * cyc + lambda_idty * idty.

    ``parts`` keys: ``adv_ab``, ``adv_ba``, ``cyc``, ``idty`` (missing keys
    count as 0). Returns ``(total, breakdown)`` with weighted terms.
    """
    get = lambda k: parts.get(k, 0.0)
    breakdown = {
        "adv_ab": get("adv_ab"),
        "adv_ba": get("adv_ba"),
        "cyc": weights.lambda_cyc * get("cyc"),
        "idty": weights.lambda_idty * get("idty"),
    }
    total = breakdown["adv_ab"] + breakdown["adv_ba"] + breakdown["cyc"] + breakdown["idty"]
    return total, breakdown


def conditional_cycle_loss(a_i, a_next, b_i, b_next, g_b, g_a, b_next_translated, a_next_translated):
    """|G_A(G_B(a_i, b~_{i+1}), a_{i+1}) - a_i| + |G_B(G_A(b_i, a~_{i+1}), b_{i+1}) - b_i|.

    Forward passes condition on the cascade output (``*_translated``); the
    way back conditions on the true deeper features of the source image.
    """
    fake_b = g_b(a_i, b_next_translated)
    fake_a = g_a(b_i, a_next_translated)
    return l1_mean(g_a(fake_b, a_next), a_i) + l1_mean(g_b(fake_a, b_next), b_i)


def conditional_identity_loss(a_i, a_next, b_i, b_next, g_b, g_a):
    return l1_mean(g_a(a_i, a_next), a_i) + l1_mean(g_b(b_i, b_next), b_i)


def lsgan_loss(out_real: Optional[torch.Tensor], out_fake: torch.Tensor, side: str) -> torch.Tensor:
    """Least-squares GAN with targets 1 (real) / 0 (fake), each term halved."""
    if side == "generator":
        return 0.5 * ((out_fake - 1.0) ** 2).mean()
    if side == "discriminator":
        if out_real is None:
            raise LossError("discriminator side needs real outputs")
        return 0.5 * ((out_real - 1.0) ** 2).mean() + 0.5 * (out_fake**2).mean()
    raise LossError(f"side must be 'generator' or 'discriminator', got {side!r}")


def check_finite(terms: Dict[str, float], limit: float = 1e6) -> Optional[str]:
    """Name of the first term that is non-finite or above ``limit``, else None."""
    for k, v in terms.items():
        if not math.isfinite(v) or abs(v) > limit:
            return k
    return None
