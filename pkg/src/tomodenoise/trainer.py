"""Adversarial training loop: paired volumes in, generator checkpoints out.

One generator step = sample a batch of slice indices (and one crop
position), run ``d_steps_per_g`` critic updates, then one generator
update; both networks use ADAM.  Everything that touches randomness is
derived from the single config seed, so the same volumes and config
reproduce the metrics log and final checkpoint byte for byte.

The metrics log is tab-separated with columns
``step  w_term  gp_term  adv  mse  vgg  total_g  d_updates``: the seven
loss columns per generator step (critic terms from the step's final
critic update), plus the cumulative critic update count for auditing the
update ratio.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .errors import (
    ConfigurationError,
    CorruptFileError,
    IndexRangeError,
    InvalidSpecError,
    IOFailureError,
    NumericalError,
    ShapeError,
)
from .formats import load_generator_checkpoint, save_generator_checkpoint
from .losses import (
    LossWeights,
    adversarial_loss,
    discriminator_loss,
    generator_loss,
    perceptual_loss,
    pixel_mse,
)
from .network import (
    EXTRACTOR_KINDS,
    SliceStack,
    build_discriminator,
    build_feature_extractor,
    build_generator,
)
from .phantoms import Volume
from .quality import feature_slice_mask
from .recon import SliceImage

METRICS_COLUMNS = ("step", "w_term", "gp_term", "adv", "mse", "vgg", "total_g", "d_updates")


@dataclass
class TrainConfig:
    """Knobs of one training run; loss weights must be given explicitly."""

    weights: LossWeights
    d: int = 3
    batch_size: int = 4
    d_steps_per_g: int = 4
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    total_g_steps: int = 8000
    crop_size: object = 256  # pixels, or the string "full"
    seed: int = 0
    extractor_kind: str = "pretrained_vgg"
    vgg_weights: object = None
    vgg_count_mode: str = "weight_layers"
    checkpoint_every: int = 1000
    mse_form: str = "sum"
    feature_threshold: float = 0.01

    def validate(self):
        self.weights.validate()
        if self.d % 2 != 1 or self.d < 1:
            raise InvalidSpecError(f"stack depth d must be odd and >= 1, got {self.d}")
        if self.batch_size < 1:
            raise InvalidSpecError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.d_steps_per_g < 1:
            raise InvalidSpecError(f"d_steps_per_g must be >= 1, got {self.d_steps_per_g}")
        if self.crop_size != "full":
            if not isinstance(self.crop_size, int) or self.crop_size < 8:
                raise InvalidSpecError(f"crop_size must be 'full' or an integer >= 8, got {self.crop_size!r}")
            if self.crop_size % 8 != 0:
                raise InvalidSpecError(f"crop_size must be a multiple of 8, got {self.crop_size}")
        if self.total_g_steps < 0:
            raise InvalidSpecError(f"total_g_steps must be >= 0, got {self.total_g_steps}")
        if self.checkpoint_every < 1:
            raise InvalidSpecError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.learning_rate <= 0 or not np.isfinite(self.learning_rate):
            raise InvalidSpecError(f"learning_rate must be positive, got {self.learning_rate}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= beta < 1.0:
                raise InvalidSpecError(f"{name} must be in [0, 1), got {beta}")
        if self.extractor_kind not in EXTRACTOR_KINDS:
            raise InvalidSpecError(
                f"extractor_kind must be one of {', '.join(EXTRACTOR_KINDS)}, got {self.extractor_kind!r}"
            )
        if self.mse_form not in ("sum", "mean"):
            raise InvalidSpecError(f"mse_form must be 'sum' or 'mean', got {self.mse_form!r}")
        if not 0.0 <= self.feature_threshold < 1.0:
            raise InvalidSpecError(f"feature_threshold must be in [0, 1), got {self.feature_threshold}")


@dataclass
class TrainingPair:
    """A low-dose slice stack and the matching normal-dose target slice."""

    stack: SliceStack
    target: SliceImage

    def __post_init__(self):
        if self.stack.center_index != self.target.slice_index:
            raise InvalidSpecError(
                f"stack center {self.stack.center_index} does not match target slice "
                f"{self.target.slice_index}"
            )
        if self.stack.data.shape[1:] != self.target.data.shape:
            raise ShapeError(
                f"stack slices {self.stack.data.shape[1:]} do not match target {self.target.data.shape}"
            )


def make_training_pair(ld_volume: Volume, nd_volume: Volume, i: int, d: int) -> TrainingPair:
    """Slices i-d//2 .. i+d//2 of the low-dose volume, edges clamped, plus target i."""
    if ld_volume.data.shape != nd_volume.data.shape:
        raise ShapeError(
            f"volume dims differ: {ld_volume.data.shape} vs {nd_volume.data.shape}"
        )
    n_slices = ld_volume.data.shape[0]
    if not 0 <= i < n_slices:
        raise IndexRangeError(f"slice index {i} outside volume of {n_slices} slices")
    if d % 2 != 1 or d < 1:
        raise InvalidSpecError(f"stack depth d must be odd and >= 1, got {d}")
    half = d // 2
    indices = np.clip(np.arange(i - half, i + half + 1), 0, n_slices - 1)
    stack = SliceStack(ld_volume.data[indices], center_index=i)
    target = SliceImage(nd_volume.data[i], provenance=nd_volume.provenance, slice_index=i)
    return TrainingPair(stack, target)


class TrainSeeds(NamedTuple):
    generator_init: int
    discriminator_init: int
    sampler: int
    epsilon: int


def derive_seeds(seed: int) -> TrainSeeds:
    """Independent per-role seeds, all reproducible from the config seed."""
    children = np.random.SeedSequence(seed).spawn(4)
    return TrainSeeds(*(int(c.generate_state(1)[0]) for c in children))


def sample_batch(rng, feature_indices, m, height, width, crop):
    """One step's slice indices and crop corner, drawn from the sampler rng."""
    indices = rng.choice(feature_indices, size=m, replace=True)
    if crop < height:
        top = int(rng.integers(0, height - crop + 1))
        left = int(rng.integers(0, width - crop + 1))
    else:
        top, left = 0, 0
    return indices, top, left


@dataclass
class TrainResult:
    checkpoint_paths: list
    final_checkpoint: Path
    metrics_path: Path
    g_updates: int
    d_updates: int
    feature_indices: np.ndarray


def _batch_tensors(ld_volume, nd_volume, indices, d, top, left, crop):
    stacks, targets = [], []
    for i in indices:
        pair = make_training_pair(ld_volume, nd_volume, int(i), d)
        stacks.append(pair.stack.data[:, top : top + crop, left : left + crop])
        targets.append(pair.target.data[top : top + crop, left : left + crop])
    ld = torch.from_numpy(np.asarray(stacks, dtype=np.float32))
    nd = torch.from_numpy(np.asarray(targets, dtype=np.float32)).unsqueeze(1)
    return ld, nd


def _format_row(step, w_term, gp_term, adv, mse, vgg, total_g, d_updates):
    floats = "\t".join(f"{v:.9g}" for v in (w_term, gp_term, adv, mse, vgg, total_g))
    return f"{step}\t{floats}\t{d_updates}\n"


def read_metrics(path) -> dict:
    """Parse a metrics log back into column name -> float array."""
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise IOFailureError(f"cannot read {path}: {e}") from None
    if not lines:
        raise CorruptFileError(f"{path}: empty metrics log")
    header = tuple(lines[0].split("\t"))
    if header != METRICS_COLUMNS:
        raise CorruptFileError(f"{path}: unexpected metrics columns {header}")
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(METRICS_COLUMNS):
            raise CorruptFileError(f"{path}:{n}: expected {len(METRICS_COLUMNS)} fields")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise CorruptFileError(f"{path}:{n}: non-numeric field") from None
    table = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(METRICS_COLUMNS))
    return {name: table[:, k] for k, name in enumerate(METRICS_COLUMNS)}


def train(
    ld_volume: Volume,
    nd_volume: Volume,
    config: TrainConfig,
    out_dir,
    extractor=None,
) -> TrainResult:
    """Run the full adversarial loop, writing checkpoints and a metrics log.

    A checkpoint of the freshly initialized generator is always written;
    further checkpoints follow every ``checkpoint_every`` generator steps
    plus a final one.  A non-finite loss aborts the run with the last
    written checkpoint left in place.
    """
    config.validate()
    if ld_volume.data.shape != nd_volume.data.shape:
        raise ShapeError(
            f"volume dims differ: {ld_volume.data.shape} vs {nd_volume.data.shape}"
        )
    _, height, width = ld_volume.data.shape
    if config.crop_size == "full":
        if height % 8 or width % 8:
            raise ConfigurationError(
                f"full-frame training needs slice dims divisible by 8, got {height}x{width}"
            )
        crop = height
    else:
        crop = config.crop_size
        if crop > min(height, width):
            raise ConfigurationError(
                f"crop_size {crop} exceeds slice dims {height}x{width}"
            )

    seeds = derive_seeds(config.seed)
    generator = build_generator(config.d, seed=seeds.generator_init)
    discriminator = build_discriminator(seed=seeds.discriminator_init)
    if extractor is None:
        extractor = build_feature_extractor(
            config.extractor_kind,
            weights_path=config.vgg_weights,
            count_mode=config.vgg_count_mode,
        )

    mask = feature_slice_mask(nd_volume.data, rel_threshold=config.feature_threshold)
    feature_indices = np.flatnonzero(mask)
    if feature_indices.size == 0:
        raise InvalidSpecError("no feature-bearing slices to train on")

    opt_g = torch.optim.Adam(
        generator.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2)
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2)
    )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sampler_rng = np.random.default_rng(seeds.sampler)
    epsilon_rng = np.random.default_rng(seeds.epsilon)

    def save_step(step, d_updates):
        path = out_dir / f"generator_step_{step:06d}.ckpt"
        save_generator_checkpoint(
            path,
            generator,
            meta={"g_step": str(step), "d_updates": str(d_updates), "seed": str(config.seed)},
        )
        return path

    checkpoint_paths = [save_step(0, 0)]
    metrics_path = out_dir / "metrics.tsv"
    d_updates = 0
    with open(metrics_path, "w") as log:
        log.write("\t".join(METRICS_COLUMNS) + "\n")
        for step in range(1, config.total_g_steps + 1):
            indices, top, left = sample_batch(
                sampler_rng, feature_indices, config.batch_size, height, width, crop
            )
            ld_batch, nd_batch = _batch_tensors(
                ld_volume, nd_volume, indices, config.d, top, left, crop
            )
            try:
                w_term = gp_term = 0.0
                for _ in range(config.d_steps_per_g):
                    epsilon = epsilon_rng.random(config.batch_size)
                    d_loss, diag = discriminator_loss(
                        discriminator, ld_batch, nd_batch, generator, config.weights,
                        epsilon=epsilon,
                    )
                    opt_d.zero_grad(set_to_none=True)
                    d_loss.backward()
                    opt_d.step()
                    d_updates += 1
                    w_term, gp_term = diag["wasserstein"], diag["gradient_penalty"]

                denoised = generator(ld_batch)
                adv = adversarial_loss(discriminator, denoised)
                mse = pixel_mse(denoised, nd_batch, form=config.mse_form)
                vgg = perceptual_loss(extractor, denoised, nd_batch)
                total_g = generator_loss(adv, mse, vgg, config.weights)
                opt_g.zero_grad(set_to_none=True)
                total_g.backward()
                opt_g.step()
            except NumericalError as e:
                log.flush()
                raise NumericalError(
                    f"training aborted at generator step {step}: {e.message}; "
                    f"last checkpoint retained at {checkpoint_paths[-1]}"
                ) from e

            log.write(_format_row(
                step,
                w_term,
                gp_term,
                float(adv.detach()),
                float(mse.detach()),
                float(vgg.detach()),
                float(total_g.detach()),
                d_updates,
            ))
            log.flush()
            if step % config.checkpoint_every == 0:
                checkpoint_paths.append(save_step(step, d_updates))

        if config.total_g_steps > 0 and config.total_g_steps % config.checkpoint_every != 0:
            checkpoint_paths.append(save_step(config.total_g_steps, d_updates))

    return TrainResult(
        checkpoint_paths=checkpoint_paths,
        final_checkpoint=checkpoint_paths[-1],
        metrics_path=metrics_path,
        g_updates=config.total_g_steps,
        d_updates=d_updates,
        feature_indices=feature_indices,
    )


def ablate_depth(
    train_ld: Volume,
    train_nd: Volume,
    eval_ld: Volume,
    eval_gt: Volume,
    depths,
    base_config: TrainConfig,
    out_dir,
):
    """Train one model per stack depth and evaluate each on held-out data.

    Returns {d: QualityReport} so distributions can be compared across
    depths; every report covers the same evaluated slice set.
    """
    from .enhance import enhance_volume
    from .quality import build_report

    out_dir = Path(out_dir)
    reports = {}
    for d in depths:
        config = dataclasses.replace(base_config, d=int(d))
        result = train(train_ld, train_nd, config, out_dir / f"depth_{d}")
        generator, _ = load_generator_checkpoint(result.final_checkpoint)
        denoised = enhance_volume(generator, eval_ld, d=int(d), pad=True)
        reports[int(d)] = build_report(
            eval_gt, eval_ld, denoised, rel_threshold=base_config.feature_threshold
        )
    return reports
