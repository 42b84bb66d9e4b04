"""Conditional control branch over a frozen noise predictor.

The branch is a trainable copy of the base predictor trunk plus a
learnable downsampling stack that turns the bare-face image into a
condition latent.  Its middle and upsample-stage feature maps are
tapped through zero-initialized 1x1 convolutions and summed into the
base prediction:

    eps(z_t, p, t, c) = base(z_t, p, t) + branch(z_t, p, t, c)

Zero-initialized taps make a fresh branch an exact no-op, and the
additive form keeps the base's gradient path disjoint from the
branch's.  Training minimizes the plain noise-matching loss with an
empty prompt, so the branch itself learns what separates a made-up
face from its bare counterpart.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backend import TORCH_DTYPE, ToyLatentCodec, ToyNoisePredictor, ToyTextEncoder
from .dataprep import PseudoPair
from .diffusion import NoiseSchedule
from .grids import ImageGrid, LatentGrid


class TrainingError(RuntimeError):
    """Training aborted (bad inputs or non-finite loss)."""


def _image_to_tensor(image: ImageGrid) -> torch.Tensor:
    return torch.from_numpy(
        np.ascontiguousarray(image.data.transpose(2, 0, 1))
    ).to(TORCH_DTYPE)


def _latent_to_tensor(latent: LatentGrid) -> torch.Tensor:
    return torch.from_numpy(
        np.ascontiguousarray(latent.data.transpose(2, 0, 1))
    ).to(TORCH_DTYPE)


def _tensor_to_latent(t: torch.Tensor, factor: int) -> LatentGrid:
    return LatentGrid(
        t.detach().numpy().transpose(1, 2, 0), resolution_factor=factor
    )


class ConditionEncoder(nn.Module):
    """Learnable convolutional stack mapping an image to a condition latent.

    Built as log2(factor) stride-2 convolutions.  Initialization
    reproduces the codec's encoder (block mean + fixed channel mix on
    the symmetric value range) exactly, so the condition latent starts
    out as *the* latent of the bare face and training refines it from
    there.
    """

    def __init__(self, codec_mix: np.ndarray, factor: int = 8):
        super().__init__()
        stages = int(math.log2(factor))
        if 2**stages != factor:
            raise ValueError(f"resolution factor {factor} must be a power of 2")
        self.factor = factor
        self.latent_channels = codec_mix.shape[0]
        convs = []
        for i in range(stages):
            out_ch = self.latent_channels if i == stages - 1 else 3
            convs.append(
                nn.Conv2d(3, out_ch, kernel_size=2, stride=2, dtype=TORCH_DTYPE)
            )
        self.convs = nn.ModuleList(convs)
        with torch.no_grad():
            for i, conv in enumerate(self.convs):
                conv.weight.zero_()
                conv.bias.zero_()
                if i == 0:
                    # 2 * blockmean(x) - 1 maps unit range to the model range.
                    for ch in range(3):
                        conv.weight[ch, ch] = 0.5
                    conv.bias.fill_(-1.0)
                elif i < stages - 1:
                    for ch in range(3):
                        conv.weight[ch, ch] = 0.25
                else:
                    mix = torch.from_numpy(np.asarray(codec_mix)).to(TORCH_DTYPE)
                    conv.weight.copy_(
                        (mix / 4.0)[:, :, None, None].expand(-1, -1, 2, 2)
                    )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = image.unsqueeze(0)
        for conv in self.convs:
            x = conv(x)
        return x[0]


class ControlBranch(nn.Module):
    """Trainable conditional residual over a frozen base predictor."""

    def __init__(
        self,
        trunk: ToyNoisePredictor,
        cond_encoder: ConditionEncoder,
        seed: int,
    ):
        super().__init__()
        if cond_encoder.latent_channels != trunk.latent_channels:
            raise ValueError("condition encoder and trunk disagree on channels")
        self.trunk = trunk
        self.cond_encoder = cond_encoder
        self.cond_proj = nn.Conv2d(
            trunk.latent_channels, trunk.hidden, kernel_size=1, dtype=TORCH_DTYPE
        )
        self.tap_mid = nn.Conv2d(
            trunk.hidden, trunk.latent_channels, kernel_size=1, dtype=TORCH_DTYPE
        )
        self.tap_up = nn.Conv2d(
            trunk.hidden, trunk.latent_channels, kernel_size=1, dtype=TORCH_DTYPE
        )
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB7A)))
        with torch.no_grad():
            w = rng.standard_normal(tuple(self.cond_proj.weight.shape))
            scale = self.cond_proj.weight.shape[1] ** -0.5
            self.cond_proj.weight.copy_(
                torch.from_numpy(w * scale).to(TORCH_DTYPE)
            )
            self.cond_proj.bias.zero_()
            for tap in (self.tap_mid, self.tap_up):
                tap.weight.zero_()
                tap.bias.zero_()
        self.requires_grad_(True)

    @classmethod
    def from_base(
        cls, base: ToyNoisePredictor, codec: ToyLatentCodec, seed: int
    ) -> "ControlBranch":
        """Branch whose trunk starts as an exact copy of the base."""
        trunk = copy.deepcopy(base)
        trunk.requires_grad_(True)
        encoder = ConditionEncoder(codec.encode_mix, factor=codec.resolution_factor)
        return cls(trunk, encoder, seed)

    @property
    def zero_init_flag(self) -> bool:
        """True while both output taps are still exactly zero."""
        return bool(
            (self.tap_mid.weight == 0).all()
            and (self.tap_mid.bias == 0).all()
            and (self.tap_up.weight == 0).all()
            and (self.tap_up.bias == 0).all()
        )

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def parameter_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, param in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(param.detach().numpy().tobytes())
        return h.hexdigest()

    def encode_condition_t(self, naked: torch.Tensor) -> torch.Tensor:
        img_hw = naked.shape[1:]
        latent_hw = (img_hw[0] // self.cond_encoder.factor,
                     img_hw[1] // self.cond_encoder.factor)
        if latent_hw[0] * self.cond_encoder.factor != img_hw[0]:
            raise ValueError(
                f"image size {tuple(img_hw)} not divisible by factor "
                f"{self.cond_encoder.factor}"
            )
        return self.cond_encoder(naked)

    def encode_condition(self, naked: ImageGrid) -> LatentGrid:
        """Condition latent of a bare face at 1/factor resolution."""
        with torch.no_grad():
            c = self.encode_condition_t(_image_to_tensor(naked))
        return _tensor_to_latent(c, self.cond_encoder.factor)

    def contribution_t(
        self,
        z: torch.Tensor,
        prompt: torch.Tensor,
        t: int,
        c: torch.Tensor,
    ) -> torch.Tensor:
        if c.shape != z.shape:
            raise ValueError(
                f"condition latent {tuple(c.shape)} does not match "
                f"noisy latent {tuple(z.shape)}"
            )
        stem_extra = self.cond_proj(c.unsqueeze(0))[0]
        _, mid, up = self.trunk.trunk_features(z, prompt, t, stem_extra=stem_extra)
        return (
            self.tap_mid(mid.unsqueeze(0))[0] + self.tap_up(up.unsqueeze(0))[0]
        )


def controlled_eps_t(
    branch: ControlBranch,
    base: ToyNoisePredictor,
    z: torch.Tensor,
    prompt: torch.Tensor,
    t: int,
    c: torch.Tensor,
) -> torch.Tensor:
    """Base prediction plus branch contribution, torch surface."""
    with torch.no_grad():
        base_out = base(z, prompt, t)
    return base_out + branch.contribution_t(z, prompt, t, c)


def controlled_eps(
    branch: ControlBranch,
    base: ToyNoisePredictor,
    z_t: LatentGrid,
    prompt: np.ndarray,
    t: int,
    c: LatentGrid,
) -> LatentGrid:
    """Numpy surface over :func:`controlled_eps_t`."""
    z = _latent_to_tensor(z_t)
    p = torch.from_numpy(np.asarray(prompt, dtype=np.float64))
    with torch.no_grad():
        out = controlled_eps_t(branch, base, z, p, t, _latent_to_tensor(c))
    return z_t.like(out.numpy().transpose(1, 2, 0))


@dataclass
class BranchTrainConfig:
    """Control-branch training hyperparameters."""

    learning_rate: float = 1e-4
    grad_accum_steps: int = 4
    total_steps: int = 15000
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.grad_accum_steps, self.total_steps,
               self.batch_size) <= 0:
            raise ValueError("all training parameters must be positive")


TOY_BRANCH_STEPS = 300


@dataclass
class TrainedBranch:
    branch: ControlBranch
    losses: list[float] = field(default_factory=list)


def _draw_sample(
    rng: np.random.Generator,
    pairs: list[PseudoPair],
    codec: ToyLatentCodec,
    schedule: NoiseSchedule,
):
    """One (z_t tensor, t, eps tensor, naked tensor) training sample."""
    idx = int(rng.integers(len(pairs)))
    t = int(rng.integers(schedule.num_train_steps))
    pair = pairs[idx]
    z0 = codec.encode(pair.makeup)
    eps = rng.standard_normal(z0.shape)
    ab = schedule.alpha_bar(t)
    z_t = np.sqrt(ab) * z0.data + np.sqrt(1.0 - ab) * eps
    return (
        torch.from_numpy(z_t.transpose(2, 0, 1)).to(TORCH_DTYPE),
        t,
        torch.from_numpy(eps.transpose(2, 0, 1)).to(TORCH_DTYPE),
        _image_to_tensor(pair.naked),
    )


def train_control_branch(
    pairs: list[PseudoPair],
    base: ToyNoisePredictor,
    codec: ToyLatentCodec,
    text_encoder: ToyTextEncoder,
    schedule: NoiseSchedule,
    config: BranchTrainConfig,
) -> TrainedBranch:
    """Fit a control branch on pseudo pairs with the empty-prompt loss.

    Each optimizer step averages gradients over ``grad_accum_steps``
    micro-batches of ``batch_size`` samples.  Only branch parameters
    move; the base stays frozen.  The returned loss log holds one mean
    loss per optimizer step.
    """
    if not pairs:
        raise TrainingError("pair manifest is empty")
    base.freeze()
    branch = ControlBranch.from_base(base, codec, seed=config.seed)
    optimizer = torch.optim.Adam(branch.parameters(), lr=config.learning_rate)
    empty_prompt = torch.from_numpy(text_encoder.encode("")).to(TORCH_DTYPE)
    rng = np.random.default_rng(config.seed)

    losses = []
    items_per_step = config.grad_accum_steps * config.batch_size
    for step in range(config.total_steps):
        optimizer.zero_grad()
        step_loss = 0.0
        for _ in range(config.grad_accum_steps):
            micro = 0.0
            for _ in range(config.batch_size):
                z_t, t, eps, naked = _draw_sample(rng, pairs, codec, schedule)
                c = branch.encode_condition_t(naked)
                eps_hat = controlled_eps_t(branch, base, z_t, empty_prompt, t, c)
                micro = micro + torch.mean((eps - eps_hat) ** 2)
            micro = micro / items_per_step
            micro.backward()
            step_loss += float(micro.detach()) * config.grad_accum_steps
        if not np.isfinite(step_loss):
            raise TrainingError(
                f"non-finite loss at step {step}: {step_loss} "
                f"(lr={config.learning_rate}, seed={config.seed})"
            )
        optimizer.step()
        losses.append(step_loss / config.grad_accum_steps)
    return TrainedBranch(branch=branch, losses=losses)


def eval_branch_loss(
    pairs: list[PseudoPair],
    branch: ControlBranch,
    base: ToyNoisePredictor,
    codec: ToyLatentCodec,
    text_encoder: ToyTextEncoder,
    schedule: NoiseSchedule,
    seed: int = 0,
    num_samples: int = 64,
    zero_condition: bool = False,
) -> float:
    """Mean noise-matching loss on fixed evaluation draws.

    ``zero_condition`` replaces the condition latent with zeros, which
    measures how much the branch actually leans on the bare face.
    """
    rng = np.random.default_rng(seed)
    empty_prompt = torch.from_numpy(text_encoder.encode("")).to(TORCH_DTYPE)
    total = 0.0
    with torch.no_grad():
        for _ in range(num_samples):
            z_t, t, eps, naked = _draw_sample(rng, pairs, codec, schedule)
            c = branch.encode_condition_t(naked)
            if zero_condition:
                c = torch.zeros_like(c)
            eps_hat = controlled_eps_t(branch, base, z_t, empty_prompt, t, c)
            total += float(torch.mean((eps - eps_hat) ** 2))
    return total / num_samples
