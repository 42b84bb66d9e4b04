"""Pluggable model backends with a deterministic desk-scale implementation.

Three adapter surfaces make the pipeline backend-agnostic:

* a noise predictor mapping (latent, prompt embedding, timestep) to a
  predicted noise field of the same shape,
* a latent codec pairing an image->latent encoder with a latent->image
  decoder at a fixed resolution factor,
* a text encoder turning prompt strings into embedding sequences.

The toy implementations below are fully seeded: the same seed yields
bit-identical parameters, so every downstream run is reproducible.  The
toy codec is deliberately lossy (block-average encode, nearest-neighbour
decode), which keeps the decode-artifact blend at the end of the
sampler observable at desk scale.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .grids import ImageGrid, LatentGrid

TORCH_DTYPE = torch.float64


def _seeded_normal(rng: np.random.Generator, shape, scale: float) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape) * scale).to(TORCH_DTYPE)


def time_features(t: int, dim: int) -> np.ndarray:
    """Sinusoidal features of an integer timestep."""
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half, 1))
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def pool_prompt(prompt: torch.Tensor, embed_dim: int) -> torch.Tensor:
    """Mean-pool an (L, d) embedding sequence; empty sequences pool to 0."""
    if prompt.ndim != 2 or prompt.shape[1] != embed_dim:
        raise ValueError(
            f"prompt sequence must be (L, {embed_dim}), got {tuple(prompt.shape)}"
        )
    if prompt.shape[0] == 0:
        return torch.zeros(embed_dim, dtype=TORCH_DTYPE)
    return prompt.mean(dim=0)


class ToyNoisePredictor(nn.Module):
    """Small convolutional noise predictor with timestep and prompt conditioning.

    Trunk: a stem convolution shifted by projected timestep and pooled
    prompt features, a middle convolution and an upsample-stage
    convolution (both full latent resolution at toy scale), then an
    output head with a direct prompt-to-output skip.  The middle and
    upsample-stage feature maps are exposed so a control branch can tap
    them.
    """

    def __init__(
        self,
        seed: int,
        latent_channels: int = 4,
        embed_dim: int = 16,
        hidden: int = 16,
        time_dim: int = 8,
    ):
        super().__init__()
        self.seed = seed
        self.latent_channels = latent_channels
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.time_dim = time_dim

        kw = dict(kernel_size=3, padding=1, dtype=TORCH_DTYPE)
        self.conv_in = nn.Conv2d(latent_channels, hidden, **kw)
        self.t_proj = nn.Linear(time_dim, hidden, dtype=TORCH_DTYPE)
        self.p_proj = nn.Linear(embed_dim, hidden, dtype=TORCH_DTYPE)
        self.conv_mid = nn.Conv2d(hidden, hidden, **kw)
        self.conv_up = nn.Conv2d(hidden, hidden, **kw)
        self.conv_out = nn.Conv2d(hidden, latent_channels, **kw)
        self.p_out = nn.Linear(embed_dim, latent_channels, dtype=TORCH_DTYPE)
        self._seed_parameters(np.random.default_rng(seed))

    def _seed_parameters(self, rng: np.random.Generator) -> None:
        with torch.no_grad():
            for name, param in sorted(self.named_parameters()):
                if name.endswith("bias"):
                    param.zero_()
                else:
                    fan_in = int(np.prod(param.shape[1:]))
                    param.copy_(
                        _seeded_normal(rng, tuple(param.shape), fan_in**-0.5)
                    )

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.parameters())

    def freeze(self) -> "ToyNoisePredictor":
        self.requires_grad_(False)
        return self

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for name, param in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(param.detach().numpy().tobytes())
        return h.hexdigest()

    def trunk_features(
        self,
        z: torch.Tensor,
        prompt: torch.Tensor,
        t: int,
        stem_extra: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return (pooled prompt, middle features, upsample-stage features).

        ``z`` is (C, h, w); ``stem_extra`` is an optional (hidden, h, w)
        shift added at the stem, used by control branches to ingest
        their condition latent.
        """
        if z.ndim != 3 or z.shape[0] != self.latent_channels:
            raise ValueError(
                f"latent must be ({self.latent_channels}, h, w), "
                f"got {tuple(z.shape)}"
            )
        pooled = pool_prompt(prompt, self.embed_dim)
        tfeat = torch.from_numpy(time_features(t, self.time_dim)).to(TORCH_DTYPE)
        x = self.conv_in(z.unsqueeze(0))[0]
        x = x + self.t_proj(tfeat)[:, None, None]
        x = x + self.p_proj(pooled)[:, None, None]
        if stem_extra is not None:
            x = x + stem_extra
        a = torch.tanh(x)
        mid = torch.tanh(self.conv_mid(a.unsqueeze(0))[0])
        up = torch.tanh(self.conv_up(mid.unsqueeze(0))[0])
        return pooled, mid, up

    def forward(self, z: torch.Tensor, prompt: torch.Tensor, t: int) -> torch.Tensor:
        pooled, _, up = self.trunk_features(z, prompt, t)
        out = self.conv_out(up.unsqueeze(0))[0]
        return out + self.p_out(pooled)[:, None, None]

    def predict(self, z: LatentGrid, prompt: np.ndarray, t: int) -> LatentGrid:
        """Numpy convenience surface around :meth:`forward`."""
        z_t = torch.from_numpy(np.ascontiguousarray(z.data.transpose(2, 0, 1)))
        p_t = torch.from_numpy(np.asarray(prompt, dtype=np.float64))
        with torch.no_grad():
            out = self.forward(z_t.to(TORCH_DTYPE), p_t, t)
        return z.like(out.numpy().transpose(1, 2, 0))


@dataclass(frozen=True)
class ToyLatentCodec:
    """Lossy block-average encoder / nearest-neighbour decoder.

    Unit-range images are mapped to the symmetric model range, pooled by
    ``resolution_factor`` and linearly mixed into ``latent_channels``
    channels.  Decoding applies the pseudo-inverse mix and nearest
    upsampling, so colours round-trip while spatial detail does not.
    """

    seed: int
    latent_channels: int = 4
    resolution_factor: int = 8

    def __post_init__(self):
        if self.latent_channels < 3:
            raise ValueError("toy codec needs at least 3 latent channels")
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0xC0DEC)))
        w_enc = rng.standard_normal((self.latent_channels, 3)) / np.sqrt(3.0)
        w_dec = np.linalg.pinv(w_enc)
        w_enc.flags.writeable = False
        w_dec.flags.writeable = False
        object.__setattr__(self, "_w_enc", w_enc)
        object.__setattr__(self, "_w_dec", w_dec)

    @property
    def encode_mix(self) -> np.ndarray:
        return self._w_enc

    def encode(self, image: ImageGrid) -> LatentGrid:
        f = self.resolution_factor
        h, w = image.height, image.width
        if h % f or w % f:
            raise ValueError(f"image size {h}x{w} not divisible by factor {f}")
        lo, hi = image.value_range
        x = (image.data - lo) / (hi - lo) * 2.0 - 1.0
        pooled = x.reshape(h // f, f, w // f, f, 3).mean(axis=(1, 3))
        return LatentGrid(pooled @ self._w_enc.T, resolution_factor=f)

    def decode(self, latent: LatentGrid) -> ImageGrid:
        f = self.resolution_factor
        x = latent.data @ self._w_dec.T
        x = np.repeat(np.repeat(x, f, axis=0), f, axis=1)
        return ImageGrid(np.clip((x + 1.0) / 2.0, 0.0, 1.0))


class ToyTextEncoder:
    """Context-free token embedder with a seeded, hash-derived table.

    Tokenization is lowercase whitespace splitting wrapped in begin/end
    sentinels; the placeholder string ``<*>`` survives as a single
    token.  Each token's embedding is derived from a keyed hash of the
    token text, so the table is deterministic without being stored.
    """

    BOS = "<bos>"
    EOS = "<eos>"

    def __init__(self, seed: int = 0, embed_dim: int = 16):
        self.seed = seed
        self.embed_dim = embed_dim
        self._key = f"text-encoder:{seed}".encode()

    def tokenize(self, text: str) -> list[str]:
        return [self.BOS, *text.lower().split(), self.EOS]

    def token_embedding(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(token.encode(), digest_size=8, key=self._key)
        rng = np.random.default_rng(int.from_bytes(digest.digest(), "little"))
        return rng.standard_normal(self.embed_dim) / np.sqrt(self.embed_dim)

    def encode(self, text: str) -> np.ndarray:
        tokens = self.tokenize(text)
        return np.stack([self.token_embedding(tok) for tok in tokens])


def toy_backend(
    seed: int,
    latent_channels: int = 4,
    embed_dim: int = 16,
    hidden: int = 16,
    resolution_factor: int = 8,
) -> tuple[ToyNoisePredictor, ToyLatentCodec]:
    """Deterministic toy predictor + codec pair for desk-scale runs."""
    predictor = ToyNoisePredictor(
        seed, latent_channels=latent_channels, embed_dim=embed_dim, hidden=hidden
    )
    codec = ToyLatentCodec(
        seed, latent_channels=latent_channels, resolution_factor=resolution_factor
    )
    return predictor, codec
