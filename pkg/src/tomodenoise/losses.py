"""Adversarial training losses: critic loss with gradient penalty, plus the
generator's adversarial, perceptual, and pixel-MSE terms and their weighted
sum.

All quantities are computed on torch tensors so gradients flow to whichever
network is being updated; convenience conversion from 2D arrays and
SliceImage is provided for the pure-metric uses.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidSpecError, NumericalError, ShapeError

MSE_FORMS = ("sum", "mean")


@dataclass
class LossWeights:
    """Weights of the combined objective; lambda_d scales the gradient penalty."""

    lambda_g: float
    lambda_p: float
    lambda_v: float
    lambda_d: float = 10.0

    def validate(self):
        for name in ("lambda_g", "lambda_p", "lambda_v", "lambda_d"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidSpecError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class MixedSample:
    """Per-item interpolation between generated and reference images."""

    epsilon: torch.Tensor  # shape (m,)
    image: torch.Tensor  # eps * G(LD) + (1 - eps) * ND


def _to_batch(x, name):
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(getattr(x, "data", x)))
    if t.ndim == 2:
        t = t[None, None]
    if t.ndim != 4:
        raise ShapeError(f"{name} must be 2D or (N, C, H, W), got shape {tuple(t.shape)}")
    return t


def _require_finite(t, term):
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {term}")


def mix_samples(generated, real, seed=None, epsilon=None) -> MixedSample:
    """Draw one epsilon per batch item and interpolate the image pair."""
    m = generated.shape[0]
    if epsilon is None:
        g = torch.Generator()
        if seed is not None:
            g.manual_seed(int(seed))
        epsilon = torch.rand(m, generator=g, dtype=generated.dtype)
    else:
        epsilon = torch.as_tensor(epsilon, dtype=generated.dtype).reshape(m)
    e = epsilon.view(m, 1, 1, 1)
    return MixedSample(epsilon, e * generated + (1.0 - e) * real)


def discriminator_loss(
    d_params,
    ld_stacks,
    nd_images,
    g_params,
    weights: LossWeights,
    seed=None,
    epsilon=None,
):
    """Critic objective: Wasserstein difference plus gradient penalty.

    Returns (loss, diagnostics); diagnostics expose the Wasserstein and
    penalty terms separately along with the epsilon draw.  The generator is
    treated as fixed (its output is detached).
    """
    weights.validate()
    ld = _to_batch(ld_stacks, "ld_stacks")
    nd = _to_batch(nd_images, "nd_images")
    if ld.shape[0] != nd.shape[0] or ld.shape[0] < 1:
        raise InvalidSpecError(f"batch sizes differ or empty: {ld.shape[0]} vs {nd.shape[0]}")
    fake = g_params(ld).detach()
    score_fake = d_params(fake)
    _require_finite(score_fake, "critic scores on generated images")
    score_real = d_params(nd)
    _require_finite(score_real, "critic scores on reference images")
    w_term = score_fake.mean() - score_real.mean()

    mixed = mix_samples(fake, nd, seed=seed, epsilon=epsilon)
    x_mixed = mixed.image.detach().requires_grad_(True)
    score_mixed = d_params(x_mixed)
    _require_finite(score_mixed, "critic scores on mixed images")
    if score_mixed.requires_grad:
        (grad,) = torch.autograd.grad(
            score_mixed.sum(), x_mixed, create_graph=True, allow_unused=True
        )
    else:  # critic output is constant in its input
        grad = None
    if grad is None:
        grad = torch.zeros_like(x_mixed)
    norms = grad.flatten(1).norm(dim=1)
    penalty = ((norms - 1.0) ** 2).mean()
    _require_finite(penalty, "gradient penalty")
    total = w_term + weights.lambda_d * penalty
    diagnostics = {
        "wasserstein": float(w_term.detach()),
        "gradient_penalty": float(penalty.detach()),
        "total": float(total.detach()),
        "epsilon": mixed.epsilon.detach().clone(),
        "mixed": mixed.image.detach(),
    }
    return total, diagnostics


def adversarial_loss(d_params, generated):
    """Generator's adversarial term: negated mean critic score."""
    gen = _to_batch(generated, "generated")
    if gen.shape[0] < 1:
        raise InvalidSpecError("empty generated batch")
    score = d_params(gen)
    _require_finite(score, "critic scores on generated images")
    return -score.mean()


def pixel_mse(denoised, target, form: str = "sum"):
    """Squared pixel error; the default fully-summed form, or per-pixel mean."""
    if form not in MSE_FORMS:
        raise InvalidSpecError(f"form must be one of {MSE_FORMS}, got {form!r}")
    a = _to_batch(denoised, "denoised")
    b = _to_batch(target, "target")
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = (a - b) ** 2
    per_item = sq.sum(dim=(1, 2, 3)) if form == "sum" else sq.mean(dim=(1, 2, 3))
    return per_item.mean()


def perceptual_loss(extractor, denoised, target):
    """Sum of squared feature-map differences under the frozen extractor."""
    a = _to_batch(denoised, "denoised")
    b = _to_batch(target, "target")
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    fa = extractor(a)
    fb = extractor(b)
    return ((fa - fb) ** 2).sum(dim=(1, 2, 3)).mean()


def generator_loss(adv, mse, vgg, weights: LossWeights):
    """Weighted sum of the three generator terms."""
    weights.validate()
    for name, v in (("adv", adv), ("mse", mse), ("vgg", vgg)):
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not np.isfinite(val):
            raise NumericalError(f"non-finite {name} loss term: {val}")
    return weights.lambda_g * adv + weights.lambda_p * mse + weights.lambda_v * vgg
