"""Analytic per-layer cost model of the autoencoder.

Counting convention, fixed for reproducible reports:
  * one multiply-accumulate (MAC) = 2 FLOPs;
  * softmax, layer norm, GELU, and sigmoid cost 5 FLOPs per element
    (the softmax figure includes the score scaling);
  * bias and residual additions cost 1 FLOP per element;
  * reshapes and transposes are free.
All counts are per sample, so reports are invariant to batch size. The
attention entries are produced directly from ``attention_flops`` and the
instrumented engine counter must agree with them exactly.

Note: the windowed stage's measured score reduction versus full attention
is 1/m^2 (total window cost m^2 * W^4 * d = L^4/m^2 * d). A 1/m^4 total
reduction is sometimes quoted for this construction; that exponent does not
survive direct counting, so reports carry the measured ratio instead.
"""

from __future__ import annotations

from dataclasses import dataclass

from .attention import AttentionFlops, attention_flops, full_attention_score_macs
from .model import CrBlock, ModelConfig, Stnet, TransformerBlock


@dataclass(frozen=True)
class LayerCost:
    name: str
    section: str      # "encoder" | "decoder"
    kind: str
    macs: int
    extra_flops: int  # non-MAC work under the convention above
    params: int

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.extra_flops


@dataclass
class FlopsReport:
    layers: list[LayerCost]
    attention_terms: dict[str, AttentionFlops]

    def _section(self, section: str) -> list[LayerCost]:
        return [entry for entry in self.layers if entry.section == section]

    @property
    def total_macs(self) -> int:
        return sum(entry.macs for entry in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(entry.flops for entry in self.layers)

    @property
    def encoder_macs(self) -> int:
        return sum(entry.macs for entry in self._section("encoder"))

    @property
    def decoder_macs(self) -> int:
        return sum(entry.macs for entry in self._section("decoder"))

    @property
    def encoder_flops(self) -> int:
        return sum(entry.flops for entry in self._section("encoder"))

    @property
    def encoder_share(self) -> float:
        return self.encoder_macs / self.total_macs

    @property
    def total_params(self) -> int:
        return sum(entry.params for entry in self.layers)

    def attention_layer_macs(self, prefix: str) -> dict[str, int]:
        """Per-term MACs of one attention block, read off the layer table."""
        wanted = {
            "lsa_score": f"{prefix}.lsa.score",
            "lsa_aggregate": f"{prefix}.lsa.aggregate",
            "gsa_score": f"{prefix}.gsa.score",
            "gsa_aggregate": f"{prefix}.gsa.aggregate",
        }
        by_name = {entry.name: entry.macs for entry in self.layers}
        out = {key: by_name[name] for key, name in wanted.items()}
        out["projections"] = (by_name[f"{prefix}.lsa.projections"]
                              + by_name[f"{prefix}.gsa.projections"])
        return out

    def lsa_reduction(self, config: ModelConfig) -> float:
        attn = config.attention
        full = full_attention_score_macs(attn.grid, attn.embed_dim)
        return self.attention_terms["encoder.stb"].lsa_score / full


def _conv_cost(name: str, section: str, conv, in_h: int, in_w: int,
               transposed: bool = False) -> tuple[LayerCost, int, int]:
    if transposed:
        ci, co, kh, kw = conv.kernel.shape
        out_h = (in_h - 1) * conv.stride - 2 * _pad(conv)[0] + kh
        out_w = (in_w - 1) * conv.stride - 2 * _pad(conv)[1] + kw
        macs = ci * co * kh * kw * in_h * in_w
    else:
        co, ci, kh, kw = conv.kernel.shape
        out_h = (in_h + 2 * _pad(conv)[0] - kh) // conv.stride + 1
        out_w = (in_w + 2 * _pad(conv)[1] - kw) // conv.stride + 1
        macs = co * ci * kh * kw * out_h * out_w
    params = conv.kernel.size + conv.bias.size
    bias_adds = co * out_h * out_w
    kind = "conv_transpose" if transposed else "conv"
    return LayerCost(name, section, kind, macs, bias_adds, params), out_h, out_w


def _pad(conv) -> tuple[int, int]:
    p = conv.padding
    return (p, p) if isinstance(p, int) else tuple(p)


def _linear_cost(name: str, section: str, linear, tokens: int) -> LayerCost:
    n_out, n_in = linear.weight.shape
    macs = tokens * n_in * n_out
    return LayerCost(name, section, "linear", macs, tokens * n_out,
                     linear.weight.size + linear.bias.size)


def _norm_cost(name: str, section: str, norm, tokens: int) -> LayerCost:
    dim = norm.gamma.size
    return LayerCost(name, section, "layer_norm", 0, 5 * tokens * dim, 2 * dim)


def _stb_costs(prefix: str, section: str, block: TransformerBlock) -> list[LayerCost]:
    cfg = block.config
    grid, window, d, heads = cfg.grid, cfg.window, cfg.embed_dim, cfg.heads
    m = cfg.windows_per_side
    tokens = grid * grid
    terms = attention_flops(cfg)

    lsa_proj_macs = 4 * tokens * d * d
    gsa_proj_macs = terms.projections - lsa_proj_macs
    lsa_softmax_elems = m * m * heads * window ** 4
    gsa_softmax_elems = heads * tokens * m * m

    def mha_params(weights) -> int:
        return sum(p.size for _, p in weights.named_params())

    entries = [
        LayerCost(f"{prefix}.lsa.projections", section, "attention", lsa_proj_macs,
                  4 * tokens * d, mha_params(block.lsa)),
        LayerCost(f"{prefix}.lsa.score", section, "attention", terms.lsa_score, 0, 0),
        LayerCost(f"{prefix}.lsa.softmax", section, "softmax", 0, 5 * lsa_softmax_elems, 0),
        LayerCost(f"{prefix}.lsa.aggregate", section, "attention", terms.lsa_aggregate, 0, 0),
        LayerCost(f"{prefix}.residual1", section, "add", 0, tokens * d, 0),
        _norm_cost(f"{prefix}.norm1", section, block.norm1, tokens),
        _linear_cost(f"{prefix}.mlp1.fc1", section, block.mlp1.fc1, tokens),
        LayerCost(f"{prefix}.mlp1.gelu", section, "gelu", 0, 5 * tokens * d, 0),
        _linear_cost(f"{prefix}.mlp1.fc2", section, block.mlp1.fc2, tokens),
        LayerCost(f"{prefix}.residual2", section, "add", 0, tokens * d, 0),
        _norm_cost(f"{prefix}.norm2", section, block.norm2, tokens),
    ]
    pool_cost, _, _ = _conv_cost(f"{prefix}.pool", section, block.pool, grid, grid)
    entries.extend([
        pool_cost,
        LayerCost(f"{prefix}.gsa.projections", section, "attention", gsa_proj_macs,
                  2 * tokens * d + 2 * m * m * d, mha_params(block.gsa)),
        LayerCost(f"{prefix}.gsa.score", section, "attention", terms.gsa_score, 0, 0),
        LayerCost(f"{prefix}.gsa.softmax", section, "softmax", 0, 5 * gsa_softmax_elems, 0),
        LayerCost(f"{prefix}.gsa.aggregate", section, "attention", terms.gsa_aggregate, 0, 0),
        LayerCost(f"{prefix}.residual3", section, "add", 0, tokens * d, 0),
        _norm_cost(f"{prefix}.norm3", section, block.norm3, tokens),
        _linear_cost(f"{prefix}.mlp2.fc1", section, block.mlp2.fc1, tokens),
        LayerCost(f"{prefix}.mlp2.gelu", section, "gelu", 0, 5 * tokens * d, 0),
        _linear_cost(f"{prefix}.mlp2.fc2", section, block.mlp2.fc2, tokens),
        LayerCost(f"{prefix}.residual4", section, "add", 0, tokens * d, 0),
        _norm_cost(f"{prefix}.norm4", section, block.norm4, tokens),
    ])
    return entries


def _cr_costs(prefix: str, block: CrBlock, grid: int) -> list[LayerCost]:
    entries = []
    for attr in ("path_a", "path_b1", "path_b2", "fuse"):
        cost, _, _ = _conv_cost(f"{prefix}.{attr}", "decoder", getattr(block, attr),
                                grid, grid)
        entries.append(cost)
    entries.append(LayerCost(f"{prefix}.skip", "decoder", "add", 0, 2 * grid * grid, 0))
    return entries


def count_flops(model: Stnet) -> FlopsReport:
    """Walk the model and produce the per-sample cost table."""
    cfg = model.config
    grid = cfg.n_delay
    layers: list[LayerCost] = []

    enc = model.encoder
    embed, h, w = _conv_cost("encoder.embed", "encoder", enc.embed, grid, grid)
    layers.append(embed)
    layers.extend(_stb_costs("encoder.stb", "encoder", enc.stb))
    head, h, w = _conv_cost("encoder.head_conv", "encoder", enc.head_conv, h, w)
    layers.append(head)
    head_t, h, w = _conv_cost("encoder.head_convt", "encoder", enc.head_convt, h, w,
                              transposed=True)
    layers.append(head_t)
    layers.append(_linear_cost("encoder.compress", "encoder", enc.compress, 1))

    dec = model.decoder
    layers.append(_linear_cost("decoder.expand", "decoder", dec.expand, 1))
    layers.extend(_cr_costs("decoder.cr1", dec.cr1, grid))
    layers.extend(_cr_costs("decoder.cr2", dec.cr2, grid))
    embed_d, _, _ = _conv_cost("decoder.embed", "decoder", dec.embed, grid, grid)
    layers.append(embed_d)
    layers.extend(_stb_costs("decoder.stb", "decoder", dec.stb))
    proj, _, _ = _conv_cost("decoder.proj", "decoder", dec.proj, grid, grid)
    layers.append(proj)
    layers.append(LayerCost("decoder.stem_sum", "decoder", "add", 0, 2 * grid * grid, 0))
    fuse, _, _ = _conv_cost("decoder.fuse", "decoder", dec.fuse, grid, grid)
    layers.append(fuse)
    layers.append(LayerCost("decoder.sigmoid", "decoder", "sigmoid", 0,
                            5 * 2 * grid * grid, 0))

    terms = {"encoder.stb": attention_flops(enc.stb.config),
             "decoder.stb": attention_flops(dec.stb.config)}
    return FlopsReport(layers=layers, attention_terms=terms)
