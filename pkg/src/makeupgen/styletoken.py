"""Style-token learning from a handful of reference images.

A style is captured as a single embedding vector bound to the
placeholder string ``<*>``.  The vector is spliced into the prompt
template's embedding sequence at the placeholder position and optimized
with the standard noise-matching loss against forward-diffused
reference latents, while every network parameter stays frozen.  The
procedure never touches any control branch: style capture depends only
on the base predictor and codec.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backend import TORCH_DTYPE, ToyLatentCodec, ToyNoisePredictor, ToyTextEncoder
from .container import read_container, write_container
from .grids import ImageGrid

PLACEHOLDER = "<*>"
DEFAULT_TEMPLATE_TEXT = f"a photo of a woman with {PLACEHOLDER} on face"

REFERENCE_RANGE = (3, 5)


class PromptError(ValueError):
    """Template has zero or multiple placeholder slots."""


@dataclass(frozen=True)
class PromptTemplate:
    text: str = DEFAULT_TEMPLATE_TEXT

    def __post_init__(self):
        count = self.text.split().count(PLACEHOLDER)
        if count != 1:
            raise PromptError(
                f"template must contain exactly one {PLACEHOLDER!r} token, "
                f"found {count}: {self.text!r}"
            )


@dataclass(frozen=True)
class StyleToken:
    """Learned placeholder embedding plus its training provenance."""

    embedding: np.ndarray
    placeholder: str = PLACEHOLDER
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.embedding, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"embedding must be a vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "embedding", arr)

    @property
    def dim(self) -> int:
        return self.embedding.shape[0]


def placeholder_index(template: PromptTemplate, encoder: ToyTextEncoder) -> int:
    tokens = encoder.tokenize(template.text)
    hits = [i for i, tok in enumerate(tokens) if tok == PLACEHOLDER]
    if len(hits) != 1:
        raise PromptError(
            f"tokenized template must contain the placeholder exactly once, "
            f"found {len(hits)}"
        )
    return hits[0]


def embed_prompt(
    template: PromptTemplate, token: StyleToken, encoder: ToyTextEncoder
) -> np.ndarray:
    """Template embedding sequence with the style vector spliced in."""
    if token.dim != encoder.embed_dim:
        raise ValueError(
            f"token dimension {token.dim} does not match encoder "
            f"dimension {encoder.embed_dim}"
        )
    seq = encoder.encode(template.text)
    seq[placeholder_index(template, encoder)] = token.embedding
    return seq


def embed_prompt_t(
    template: PromptTemplate, v: torch.Tensor, encoder: ToyTextEncoder
) -> torch.Tensor:
    """Differentiable splice: context rows are constants, row k is ``v``."""
    idx = placeholder_index(template, encoder)
    seq = torch.from_numpy(encoder.encode(template.text)).to(TORCH_DTYPE)
    return torch.cat([seq[:idx], v.unsqueeze(0), seq[idx + 1 :]])


@dataclass
class StyleLearnConfig:
    steps: int = 5000
    learning_rate: float = 1e-5
    batch_size: int = 1
    seed: int = 0
    init_word: str = "makeup"
    optimizer: str = "sgd"  # plain SGD is deterministic and the default

    def __post_init__(self):
        if min(self.steps, self.batch_size) <= 0 or self.learning_rate <= 0:
            raise ValueError("steps, batch_size and learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


TOY_STYLE_STEPS = 500


@dataclass
class LearnedStyle:
    token: StyleToken
    losses: list[float] = field(default_factory=list)


def prepare_reference(image: ImageGrid, size: int) -> ImageGrid:
    """Center-crop to square and resize to the model resolution."""
    h, w = image.height, image.width
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    cropped = image.data[top : top + side, left : left + side]
    if side == size:
        return ImageGrid(cropped)
    from PIL import Image as PILImage

    payload = np.round(cropped * 255.0).astype(np.uint8)
    resized = PILImage.fromarray(payload).resize((size, size), PILImage.BILINEAR)
    return ImageGrid(np.asarray(resized, dtype=np.float64) / 255.0)


def learn_style(
    references: list[ImageGrid],
    template: PromptTemplate,
    base: ToyNoisePredictor,
    codec: ToyLatentCodec,
    text_encoder: ToyTextEncoder,
    config: StyleLearnConfig,
    schedule,
    reference_ids: list[str] | None = None,
) -> LearnedStyle:
    """Optimize the placeholder embedding on forward-diffused references.

    One reference is drawn uniformly per step (batch size 1 by
    default).  Only the embedding vector receives gradient; the base
    predictor and text encoder are untouched.
    """
    if not references:
        raise ValueError("reference set is empty")
    lo, hi = REFERENCE_RANGE
    if not lo <= len(references) <= hi:
        warnings.warn(
            f"{len(references)} reference images given; styles are usually "
            f"learned from {lo} to {hi}",
            stacklevel=2,
        )
    base.freeze()
    size = references[0].height
    refs = [prepare_reference(img, size) for img in references]
    latents = [codec.encode(img).data for img in refs]

    v = torch.from_numpy(
        text_encoder.token_embedding(config.init_word).copy()
    ).to(TORCH_DTYPE)
    v.requires_grad_(True)
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam([v], lr=config.learning_rate)
    else:
        optimizer = torch.optim.SGD([v], lr=config.learning_rate)

    rng = np.random.default_rng(config.seed)
    losses = []
    for step in range(config.steps):
        optimizer.zero_grad()
        loss = 0.0
        for _ in range(config.batch_size):
            z0 = latents[int(rng.integers(len(latents)))]
            t = int(rng.integers(schedule.num_train_steps))
            eps = rng.standard_normal(z0.shape)
            ab = schedule.alpha_bar(t)
            z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
            z_tt = torch.from_numpy(z_t.transpose(2, 0, 1)).to(TORCH_DTYPE)
            eps_t = torch.from_numpy(eps.transpose(2, 0, 1)).to(TORCH_DTYPE)
            prompt = embed_prompt_t(template, v, text_encoder)
            eps_hat = base(z_tt, prompt, t)
            loss = loss + torch.mean((eps_t - eps_hat) ** 2)
        loss = loss / config.batch_size
        value = float(loss.detach())
        if not np.isfinite(value):
            raise RuntimeError(
                f"non-finite style loss at step {step} "
                f"(lr={config.learning_rate}, seed={config.seed})"
            )
        loss.backward()
        optimizer.step()
        losses.append(value)

    token = StyleToken(
        embedding=v.detach().numpy(),
        training_meta={
            "steps": config.steps,
            "lr": config.learning_rate,
            "reference_ids": reference_ids or [f"ref_{i}" for i in range(len(refs))],
            "seed": config.seed,
            "init_word": config.init_word,
        },
    )
    return LearnedStyle(token=token, losses=losses)


TOKEN_KIND = "style-token"


def token_store(token: StyleToken, path: str | Path) -> None:
    write_container(
        path,
        TOKEN_KIND,
        meta={
            "placeholder": token.placeholder,
            "dim": token.dim,
            "training_meta": token.training_meta,
        },
        arrays={"embedding": token.embedding},
    )


def token_load(path: str | Path, expect_dim: int | None = None) -> StyleToken:
    box = read_container(path, expect_kind=TOKEN_KIND)
    embedding = box.arrays["embedding"]
    meta_dim = box.meta.get("dim")
    if meta_dim != embedding.shape[0]:
        raise ValueError(
            f"{path}: header dimension {meta_dim} does not match stored "
            f"embedding {embedding.shape[0]}"
        )
    if expect_dim is not None and embedding.shape[0] != expect_dim:
        raise ValueError(
            f"{path}: token dimension {embedding.shape[0]} does not match "
            f"expected {expect_dim}"
        )
    return StyleToken(
        embedding=embedding,
        placeholder=box.meta.get("placeholder", PLACEHOLDER),
        training_meta=box.meta.get("training_meta", {}),
    )
