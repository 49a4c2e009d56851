"""Training objectives: WGAN-GP critic/generator, ELBO terms, IntroVAE, soft Dice.

Every loss reduces over the batch with an arithmetic mean. Losses are dtype
agnostic so the same code runs in float64 for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .nets import GaussianPosterior

PROB_CLAMP = 1e-6


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class WganGpConfig:
    lambda_gp: float = 100.0
    critic_iters_per_gen: int = 5

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be non-negative")
        if self.critic_iters_per_gen < 1:
            raise ValueError("critic_iters_per_gen must be >= 1")


@dataclass(frozen=True)
class IntroVaeConfig:
    alpha: float = 0.25
    beta: float = 1.0
    margin: float = 10.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")


@dataclass(frozen=True)
class DiceLossConfig:
    epsilon: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite {what}")


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_sample_sum(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).sum(dim=1)


# -- WGAN-GP -------------------------------------------------------------------


def interpolates(real: torch.Tensor, fake: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Per-sample points on the segments between real and fake samples."""
    e = eps.reshape(-1, *([1] * (real.dim() - 1))).to(real.dtype)
    return e * real + (1 - e) * fake


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean over the batch of ``(||grad_x C(x_hat)||_2 - 1)^2``.

    ``eps`` holds one U[0, 1] weight per sample; it is drawn from ``generator``
    when omitted. The graph is kept (``create_graph``) so the penalty can be
    differentiated again with respect to the critic parameters.
    """
    _same_shape(real, fake)
    if eps is None:
        eps = torch.rand(real.shape[0], generator=generator, dtype=real.dtype, device=real.device)
    x_hat = interpolates(real, fake, eps).detach().requires_grad_(True)
    with torch.enable_grad():
        scores = critic(x_hat)
        _check_finite(scores, "critic output in gradient penalty")
        if scores.requires_grad:
            (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)
        else:
            grad = None
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norms = torch.linalg.vector_norm(grad.reshape(grad.shape[0], -1), dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(critic, real, fake, cfg: WganGpConfig = WganGpConfig(), eps=None, generator=None, terms: dict | None = None) -> torch.Tensor:
    """``mean C(fake) - mean C(real) + lambda * GP``; optional ``terms`` dict receives the parts."""
    _same_shape(real, fake)
    c_real = critic(real)
    c_fake = critic(fake)
    _check_finite(c_real, "critic score")
    _check_finite(c_fake, "critic score")
    wasserstein = c_fake.mean() - c_real.mean()
    if cfg.lambda_gp > 0:
        gp = gradient_penalty(critic, real, fake, eps=eps, generator=generator)
    else:
        gp = torch.zeros((), dtype=wasserstein.dtype)
    if terms is not None:
        terms.update(wasserstein=wasserstein.detach(), gp=gp.detach())
    return wasserstein + cfg.lambda_gp * gp


def generator_wgan_loss(critic, fake: torch.Tensor) -> torch.Tensor:
    return -critic(fake).mean()


# -- VAE / IntroVAE -------------------------------------------------------------


def kl_standard_normal(p: GaussianPosterior) -> torch.Tensor:
    """Closed-form KL(N(mu, diag exp(log_var)) || N(0, I)), summed over dims, meaned over batch."""
    mu, log_var = p
    kl = 0.5 * (torch.expm1(log_var) - log_var + mu**2)
    return kl.reshape(kl.shape[0], -1).sum(dim=1).mean()


def reconstruction_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy summed over voxels and channels, meaned over batch."""
    _same_shape(x, x_rec)
    q = x_rec.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = -(x * torch.log(q) + (1.0 - x) * torch.log1p(-q))
    return _per_sample_sum(bce).mean()


def elbo_loss(x: torch.Tensor, x_rec: torch.Tensor, posterior: GaussianPosterior, beta: float = 1.0) -> torch.Tensor:
    """Negative ELBO: KL to the prior plus ``beta`` times reconstruction."""
    return kl_standard_normal(posterior) + beta * reconstruction_loss(x, x_rec)


def introvae_encoder_loss(
    posteriors: dict[str, GaussianPosterior],
    x: torch.Tensor,
    x_rec: torch.Tensor,
    cfg: IntroVaeConfig = IntroVaeConfig(),
    terms: dict | None = None,
) -> torch.Tensor:
    """Encoder objective with margin hinges on the reconstructed and prior-sampled KLs.

    ``posteriors`` maps ``"real"``, ``"rec"`` and ``"sampled"`` to encoder
    outputs. The caller must compute ``rec`` and ``sampled`` from *detached*
    generator outputs so no gradient reaches the generator through them.
    """
    kl_real = kl_standard_normal(posteriors["real"])
    kl_adv = {s: kl_standard_normal(posteriors[s]) for s in ("rec", "sampled")}
    hinges = {s: torch.clamp(cfg.margin - kl, min=0.0) for s, kl in kl_adv.items()}
    hinge = hinges["rec"] + hinges["sampled"]
    rec = reconstruction_loss(x, x_rec)
    if terms is not None:
        terms.update(
            kl_real=kl_real.detach(),
            kl_rec=kl_adv["rec"].detach(),
            kl_sampled=kl_adv["sampled"].detach(),
            hinge_rec=hinges["rec"].detach(),
            hinge_sampled=hinges["sampled"].detach(),
            hinge=hinge.detach(),
            rec=rec.detach(),
        )
    return kl_real + cfg.alpha * hinge + cfg.beta * rec


def introvae_generator_loss(
    posteriors: dict[str, GaussianPosterior],
    x: torch.Tensor,
    x_rec: torch.Tensor,
    cfg: IntroVaeConfig = IntroVaeConfig(),
    terms: dict | None = None,
) -> torch.Tensor:
    """Generator objective: ``alpha * (KL_rec + KL_sampled) + beta * reconstruction``.

    Here ``rec`` and ``sampled`` posteriors must be computed *with* gradients
    flowing back through the generated volumes.
    """
    adv = kl_standard_normal(posteriors["rec"]) + kl_standard_normal(posteriors["sampled"])
    rec = reconstruction_loss(x, x_rec)
    if terms is not None:
        terms.update(kl_adv=adv.detach(), rec=rec.detach())
    return cfg.alpha * adv + cfg.beta * rec


# -- segmentation ----------------------------------------------------------------


def dice_loss(pred: torch.Tensor, target: torch.Tensor, cfg: DiceLossConfig = DiceLossConfig()) -> torch.Tensor:
    """Soft Dice ``1 - 2 sum(p t) / (sum p + sum t + eps)`` per sample, meaned over batch."""
    _same_shape(pred, target)
    inter = _per_sample_sum(pred * target)
    denom = _per_sample_sum(pred) + _per_sample_sum(target) + cfg.epsilon
    return (1.0 - 2.0 * inter / denom).mean()


# -- gradient verification ---------------------------------------------------------


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    probe_count: int = 50,
    step: float = 1e-6,
    seed: int = 0,
    abs_floor: float = 1e-7,
) -> float:
    """Max relative error between autograd and central differences.

    Probes ``probe_count`` scalar entries drawn uniformly (without
    replacement) from ``params``. Relative error is
    ``|a - n| / max(|a|, |n|, abs_floor)``. Run in float64.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    loss = loss_fn()
    _check_finite(loss, "loss")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = torch.Generator().manual_seed(seed)
    picks = torch.randperm(total, generator=rng)[: min(probe_count, total)].tolist()
    offsets = [0]
    for s in sizes:
        offsets.append(offsets[-1] + s)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = max(i for i in range(len(params)) if offsets[i] <= flat)
            j = flat - offsets[k]
            view = params[k].view(-1)
            old = view[j].item()
            view[j] = old + step
            lp = loss_fn().item()
            view[j] = old - step
            lm = loss_fn().item()
            view[j] = old
            if not (torch.isfinite(torch.tensor(lp)) and torch.isfinite(torch.tensor(lm))):
                raise NumericError("non-finite loss during finite differences")
            numeric = (lp - lm) / (2 * step)
            analytic = grads[k].reshape(-1)[j].item()
            denom = max(abs(analytic), abs(numeric), abs_floor)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
