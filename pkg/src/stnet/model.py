"""The CSI-feedback autoencoder: encoder, two-stem decoder, and the blocks
they are assembled from.

The encoder embeds the two-plane channel image on the full spatial grid,
runs one separable-attention transformer block, projects back down to two
planes through a conv/transposed-conv pair, and compresses the flattened
result to the codeword with a linear layer. The decoder expands the
codeword back to image shape and refines it through two parallel stems --
a multi-resolution CNN stem and a transformer stem -- whose sum is fused by
a final convolution and squashed to (0,1) by a sigmoid, matching the
normalized data domain.

Default widths are tuned so the analytic multiply-accumulate totals of the
whole model track the complexity budget the design targets; see
``flops.count_flops``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .attention import AttentionConfig, MhaWeights, gsa_forward, lsa_forward
from .layers import Conv2d, ConvTranspose2d, LayerNorm, Linear
from .tensor import Tensor, add, gelu, reshape, sigmoid, transpose

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and width settings of one autoencoder instance.

    ``codeword_len`` fixes the compression ratio against the
    ``2 * n_delay * n_antennas`` retained channel reals. The attention grid
    is the full spatial grid, so ``n_delay`` and ``n_antennas`` must agree
    and be divisible by ``window``.
    """

    codeword_len: int
    n_delay: int = 32
    n_antennas: int = 32
    embed_dim: int = 4
    window: int = 8
    heads: int = 4
    head_width: int | None = None   # encoder projection channels; default 2*embed_dim
    cr_width: int = 6               # internal channels of the decoder CNN stem blocks
    seed: int = 0

    def __post_init__(self):
        if self.codeword_len <= 0:
            raise ValueError(f"codeword_len must be positive, got {self.codeword_len}")
        if self.codeword_len > self.flat_len:
            raise ValueError(f"codeword_len {self.codeword_len} exceeds {self.flat_len}")
        if self.n_delay != self.n_antennas:
            raise ValueError(f"square grids only: {self.n_delay} != {self.n_antennas}")
        if self.n_delay % self.window != 0:
            raise ValueError(f"grid {self.n_delay} not divisible by window {self.window}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def flat_len(self) -> int:
        return 2 * self.n_delay * self.n_antennas

    @property
    def gamma(self) -> Fraction:
        return Fraction(self.codeword_len, self.flat_len)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(grid=self.n_delay, window=self.window,
                               embed_dim=self.embed_dim, heads=self.heads)

    @property
    def encoder_channels(self) -> int:
        return self.head_width if self.head_width is not None else 2 * self.embed_dim

    @classmethod
    def for_gamma(cls, gamma: Fraction | str | float, **kwargs) -> "ModelConfig":
        """Config whose codeword length realizes ``gamma`` exactly."""
        if isinstance(gamma, str):
            num, _, den = gamma.partition("/")
            gamma = Fraction(int(num), int(den)) if den else Fraction(int(num))
        gamma = Fraction(gamma).limit_denominator(1 << 20)
        n_delay = kwargs.get("n_delay", 32)
        n_antennas = kwargs.get("n_antennas", 32)
        codeword = gamma * 2 * n_delay * n_antennas
        if codeword.denominator != 1:
            raise ValueError(f"gamma {gamma} gives non-integer codeword length {codeword}")
        return cls(codeword_len=int(codeword), **kwargs)


class Mlp:
    """linear -> GELU -> linear, both square in the embed dimension."""

    def __init__(self, rng, dim: int, name: str, dtype):
        self.fc1 = Linear.create(rng, dim, dim, f"{name}.fc1", dtype)
        self.fc2 = Linear.create(rng, dim, dim, f"{name}.fc2", dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

    def named_params(self):
        return self.fc1.named_params() + self.fc2.named_params()


class TransformerBlock:
    """Separable-attention block: local stage, then global stage, each
    followed by an add-and-normalize and an MLP with its own add-and-normalize."""

    def __init__(self, rng, config: AttentionConfig, name: str, dtype):
        self.config = config
        d = config.embed_dim
        self.lsa = MhaWeights.create(rng, d, f"{name}.lsa", dtype)
        self.norm1 = LayerNorm.create(d, f"{name}.norm1", dtype)
        self.mlp1 = Mlp(rng, d, f"{name}.mlp1", dtype)
        self.norm2 = LayerNorm.create(d, f"{name}.norm2", dtype)
        self.gsa = MhaWeights.create(rng, d, f"{name}.gsa", dtype)
        self.pool = Conv2d.create(rng, d, d, config.window, f"{name}.pool",
                                  stride=config.window, dtype=dtype)
        self.norm3 = LayerNorm.create(d, f"{name}.norm3", dtype)
        self.mlp2 = Mlp(rng, d, f"{name}.mlp2", dtype)
        self.norm4 = LayerNorm.create(d, f"{name}.norm4", dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(add(x, lsa_forward(x, self.config, self.lsa)))
        h = self.norm2(add(h, self.mlp1(h)))
        h = self.norm3(add(h, gsa_forward(h, self.config, self.gsa, self.pool)))
        return self.norm4(add(h, self.mlp2(h)))

    def named_params(self):
        out = []
        for part in (self.lsa, self.norm1, self.mlp1, self.norm2,
                     self.gsa, self.pool, self.norm3, self.mlp2, self.norm4):
            out.extend(part.named_params())
        return out


class CrBlock:
    """Multi-resolution residual block: a 3x3 path and a 1x9 -> 9x1 path,
    concatenated on channels and combined by a 1x1 convolution, plus the
    identity skip."""

    def __init__(self, rng, channels: int, width: int, name: str, dtype):
        self.path_a = Conv2d.create(rng, channels, width, 3, f"{name}.path_a",
                                    padding=1, dtype=dtype)
        self.path_b1 = Conv2d.create(rng, channels, width, (1, 9), f"{name}.path_b1",
                                     padding=(0, 4), dtype=dtype)
        self.path_b2 = Conv2d.create(rng, width, width, (9, 1), f"{name}.path_b2",
                                     padding=(4, 0), dtype=dtype)
        self.fuse = Conv2d.create(rng, 2 * width, channels, 1, f"{name}.fuse", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import concat
        a = self.path_a(x)
        b = self.path_b2(self.path_b1(x))
        return add(x, self.fuse(concat([a, b], axis=1)))

    def named_params(self):
        out = []
        for conv in (self.path_a, self.path_b1, self.path_b2, self.fuse):
            out.extend(conv.named_params())
        return out


def _to_tokens(x: Tensor) -> Tensor:
    return transpose(x, (0, 2, 3, 1))


def _to_planes(x: Tensor) -> Tensor:
    return transpose(x, (0, 3, 1, 2))


class Encoder:
    def __init__(self, rng, config: ModelConfig, dtype):
        d = config.embed_dim
        width = config.encoder_channels
        self.config = config
        self.embed = Conv2d.create(rng, 2, d, 3, "encoder.embed", padding=1, dtype=dtype)
        self.stb = TransformerBlock(rng, config.attention, "encoder.stb", dtype)
        self.head_conv = Conv2d.create(rng, d, width, 3, "encoder.head_conv",
                                       padding=1, dtype=dtype)
        self.head_convt = ConvTranspose2d.create(rng, width, 2, 3, "encoder.head_convt",
                                                 padding=1, dtype=dtype)
        self.compress = Linear.create(rng, config.flat_len, config.codeword_len,
                                      "encoder.compress", dtype)

    def __call__(self, channel_batch: Tensor) -> Tensor:
        b = channel_batch.shape[0]
        x = self.embed(channel_batch)
        x = _to_planes(self.stb(_to_tokens(x)))
        x = self.head_convt(self.head_conv(x))
        return self.compress(reshape(x, (b, self.config.flat_len)))

    def named_params(self):
        out = []
        for part in (self.embed, self.stb, self.head_conv, self.head_convt, self.compress):
            out.extend(part.named_params())
        return out


class Decoder:
    def __init__(self, rng, config: ModelConfig, dtype):
        d = config.embed_dim
        self.config = config
        self.expand = Linear.create(rng, config.codeword_len, config.flat_len,
                                    "decoder.expand", dtype)
        self.cr1 = CrBlock(rng, 2, config.cr_width, "decoder.cr1", dtype)
        self.cr2 = CrBlock(rng, 2, config.cr_width, "decoder.cr2", dtype)
        self.embed = Conv2d.create(rng, 2, d, 3, "decoder.embed", padding=1, dtype=dtype)
        self.stb = TransformerBlock(rng, config.attention, "decoder.stb", dtype)
        self.proj = Conv2d.create(rng, d, 2, 3, "decoder.proj", padding=1, dtype=dtype)
        self.fuse = Conv2d.create(rng, 2, 2, 3, "decoder.fuse", padding=1, dtype=dtype)

    def __call__(self, codewords: Tensor) -> Tensor:
        b = codewords.shape[0]
        cfg = self.config
        z = reshape(self.expand(codewords), (b, 2, cfg.n_delay, cfg.n_antennas))
        cnn_stem = self.cr2(self.cr1(z))
        tr_stem = self.proj(_to_planes(self.stb(_to_tokens(self.embed(z)))))
        return sigmoid(self.fuse(add(cnn_stem, tr_stem)))

    def named_params(self):
        out = []
        for part in (self.expand, self.cr1, self.cr2, self.embed,
                     self.stb, self.proj, self.fuse):
            out.extend(part.named_params())
        return out


class Stnet:
    """Full autoencoder; parameters are addressable by stable path names."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.dtype = dtype
        self.encoder = Encoder(rng, config, dtype)
        self.decoder = Decoder(rng, config, dtype)

    def encode(self, channel_batch: Tensor) -> Tensor:
        expected = (2, self.config.n_delay, self.config.n_antennas)
        if channel_batch.shape[1:] != expected:
            raise ValueError(f"encode: expected [b, {expected[0]}, {expected[1]}, "
                             f"{expected[2]}], got {channel_batch.shape}")
        return self.encoder(channel_batch)

    def decode(self, codewords: Tensor) -> Tensor:
        if codewords.shape[-1] != self.config.codeword_len:
            raise ValueError(f"decode: codeword length {codewords.shape[-1]} != "
                             f"{self.config.codeword_len}")
        return self.decoder(codewords)

    def forward(self, channel_batch: Tensor) -> Tensor:
        return self.decode(self.encode(channel_batch))

    __call__ = forward

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.encoder.named_params() + self.decoder.named_params():
            if name in out:
                raise RuntimeError(f"duplicate parameter path {name}")
            out[name] = p
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())


def build_model(config: ModelConfig, dtype=np.float32) -> Stnet:
    """Deterministically build the autoencoder and log its budget summary."""
    model = Stnet(config, dtype=dtype)
    from .flops import count_flops  # local import: flops reads model types
    report = count_flops(model)
    log.info("built model: gamma=%s codeword=%d params=%d macs=%d flops=%d",
             config.gamma, config.codeword_len, model.param_count(),
             report.total_macs, report.total_flops)
    return model
