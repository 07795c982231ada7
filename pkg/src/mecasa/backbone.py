"""MECASA encoder: stem, staged hybrid blocks, patch embedding, linear head.

Data flow for an input of shape (B, 1, Ch, T)::

    stem      conv3x3/s2 -> ReLU -> conv3x3/s2           -> (B, C1, Ch', T')
    stage i   blocks: integration -> +CASA -> +MLP        (shape preserved)
    between   patch embedding conv3x3/s2, C_i -> C_{i+1}
    head      global average pool -> features -> linear -> logits

No normalisation layers are used.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from ._kernels import out_size
from .attention import CasaParams, casa_forward
from .tensor import ShapeError, Tensor

TABLE2_DIMS = ("16-32", "32-64", "48-56", "64-128")


def parse_dims(text):
    """``"64-128"`` -> ``(64, 128)``."""
    try:
        dims = tuple(int(p) for p in str(text).split("-"))
    except ValueError:
        raise ValueError(f"stage dims must look like '64-128', got {text!r}") from None
    if not dims or any(d < 1 for d in dims):
        raise ValueError(f"stage dims must be positive integers, got {text!r}")
    return dims


@dataclass(frozen=True)
class BackboneConfig:
    input_height: int
    input_width: int
    stage_dims: tuple = (64, 128)
    blocks_per_stage: tuple = (2, 2)
    mlp_ratio: float = 2.0
    num_classes: int = 2
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stage_dims", tuple(int(d) for d in self.stage_dims))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.stage_dims) < 1 or len(self.stage_dims) != len(self.blocks_per_stage):
            raise ValueError("stage_dims and blocks_per_stage must be non-empty and equally long")
        ints = (self.input_height, self.input_width, self.num_classes, self.in_channels)
        if any(v < 1 for v in ints + self.stage_dims) or any(b < 0 for b in self.blocks_per_stage):
            raise ValueError(f"all dimensions must be >= 1: {self}")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def mlp_hidden(self):
        return [max(1, math.ceil(self.mlp_ratio * c)) for c in self.stage_dims]

    @property
    def feature_dim(self):
        return self.stage_dims[-1]

    def to_dict(self):
        return {
            "input_height": self.input_height,
            "input_width": self.input_width,
            "stage_dims": list(self.stage_dims),
            "blocks_per_stage": list(self.blocks_per_stage),
            "mlp_ratio": self.mlp_ratio,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor


@dataclass
class BlockParams:
    integration: list  # three depthwise ConvParams
    casa: CasaParams
    mlp: list  # two pointwise ConvParams


@dataclass
class BackboneParams:
    stem: list
    stages: list  # list (per stage) of lists of BlockParams
    patch_embeds: list
    head: LinearParams
    config: BackboneConfig = field(default=None, metadata={"static": True})

    def named_parameters(self):
        return list(T.named_tensors(self))

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _conv(rng, cout, cin_per_group, k):
    return ConvParams(
        _uniform(rng, (cout, cin_per_group, k, k), cin_per_group * k * k),
        Tensor(np.zeros(cout), requires_grad=True),
    )


def init_backbone(config, seed=0):
    """Fresh parameters for ``config``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    c1 = config.stage_dims[0]
    stem = [_conv(rng, c1, config.in_channels, 3), _conv(rng, c1, c1, 3)]
    stages, patches = [], []
    for i, (c, n_blocks) in enumerate(zip(config.stage_dims, config.blocks_per_stage)):
        hidden = config.mlp_hidden[i]
        blocks = [
            BlockParams(
                integration=[_conv(rng, c, 1, 3) for _ in range(3)],
                casa=CasaParams.init(c, rng),
                mlp=[_conv(rng, hidden, c, 1), _conv(rng, c, hidden, 1)],
            )
            for _ in range(n_blocks)
        ]
        stages.append(blocks)
        if i + 1 < len(config.stage_dims):
            patches.append(_conv(rng, config.stage_dims[i + 1], c, 3))
    cl = config.stage_dims[-1]
    head = LinearParams(_uniform(rng, (config.num_classes, cl), cl), Tensor(np.zeros(config.num_classes), requires_grad=True))
    return BackboneParams(stem=stem, stages=stages, patch_embeds=patches, head=head, config=config)


def expected_param_shapes(config):
    """Parameter name -> shape, derived from the config alone."""
    shapes = {}
    c1 = config.stage_dims[0]
    shapes["stem.0.weight"], shapes["stem.0.bias"] = (c1, config.in_channels, 3, 3), (c1,)
    shapes["stem.1.weight"], shapes["stem.1.bias"] = (c1, c1, 3, 3), (c1,)
    for i, (c, n_blocks) in enumerate(zip(config.stage_dims, config.blocks_per_stage)):
        h = config.mlp_hidden[i]
        for b in range(n_blocks):
            pre = f"stages.{i}.{b}"
            for j in range(3):
                shapes[f"{pre}.integration.{j}.weight"] = (c, 1, 3, 3)
                shapes[f"{pre}.integration.{j}.bias"] = (c,)
            for name in ("q", "k", "v"):
                shapes[f"{pre}.casa.w_{name}"] = (c, c, 1, 1)
                shapes[f"{pre}.casa.b_{name}"] = (c,)
            shapes[f"{pre}.casa.spatial_kernel"] = (c, 1, 3, 3)
            shapes[f"{pre}.casa.spatial_bias"] = (c,)
            shapes[f"{pre}.casa.channel_gate"] = (c, c)
            shapes[f"{pre}.casa.channel_bias"] = (c,)
            shapes[f"{pre}.casa.gamma"] = (c, c, 1, 1)
            shapes[f"{pre}.casa.gamma_bias"] = (c,)
            shapes[f"{pre}.mlp.0.weight"], shapes[f"{pre}.mlp.0.bias"] = (h, c, 1, 1), (h,)
            shapes[f"{pre}.mlp.1.weight"], shapes[f"{pre}.mlp.1.bias"] = (c, h, 1, 1), (c,)
        if i + 1 < len(config.stage_dims):
            shapes[f"patch_embeds.{i}.weight"] = (config.stage_dims[i + 1], c, 3, 3)
            shapes[f"patch_embeds.{i}.bias"] = (config.stage_dims[i + 1],)
    shapes["head.weight"] = (config.num_classes, config.stage_dims[-1])
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def _down(n):
    return out_size(n, 3, 2, 1)


def expected_feature_shapes(config):
    """Per-stage (C, H, W) from the conv output-size formula."""
    h, w = _down(_down(config.input_height)), _down(_down(config.input_width))
    shapes = []
    for i, c in enumerate(config.stage_dims):
        if i > 0:
            h, w = _down(h), _down(w)
        shapes.append((c, h, w))
    return shapes


# ---------------------------------------------------------------------------
# forward pieces


def _conv_apply(x, p, stride=1, padding=0, groups=1):
    return T.conv2d(x, p.weight, p.bias, stride=stride, padding=padding, groups=groups)


def stem_forward(x, stem):
    if x.ndim != 4:
        raise ShapeError(f"stem expects (B,C,Ch,T), got {x.shape}")
    if x.shape[2] < 4 or x.shape[3] < 4:
        raise ShapeError(f"input too small for the stem: {x.shape[2:]} (need both >= 4)")
    h = T.relu(_conv_apply(x, stem[0], stride=2, padding=1))
    return _conv_apply(h, stem[1], stride=2, padding=1)


def integration_subnet(x, convs):
    """x + DW3(ReLU(DW2(ReLU(DW1(x)))))."""
    c = x.shape[1]
    h = T.relu(_conv_apply(x, convs[0], padding=1, groups=c))
    h = T.relu(_conv_apply(h, convs[1], padding=1, groups=c))
    h = _conv_apply(h, convs[2], padding=1, groups=c)
    return T.add(x, h)


def mlp_forward(x, mlp):
    return _conv_apply(T.relu(_conv_apply(x, mlp[0])), mlp[1])


def mecasa_block(x, block):
    y1 = integration_subnet(x, block.integration)
    y2 = T.add(y1, casa_forward(y1, block.casa))
    return T.add(y2, mlp_forward(y2, block.mlp))


def patch_embed(x, p):
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"input too small for patch embedding: {x.shape[2:]} (need both >= 2)")
    return _conv_apply(x, p, stride=2, padding=1)


def backbone_features(x, params):
    cfg = params.config
    expect = (cfg.in_channels, cfg.input_height, cfg.input_width)
    if x.ndim != 4 or tuple(x.shape[1:]) != expect:
        raise ShapeError(f"backbone built for inputs (B,{expect[0]},{expect[1]},{expect[2]}), got {x.shape}")
    h = stem_forward(x, params.stem)
    for i, blocks in enumerate(params.stages):
        if i > 0:
            h = patch_embed(h, params.patch_embeds[i - 1])
        for block in blocks:
            h = mecasa_block(h, block)
    return T.global_avg_pool(h)


def backbone_forward(x, params):
    """Returns ``(features, logits)``; features are the fusion hand-off."""
    feats = backbone_features(x, params)
    return feats, T.linear(feats, params.head.weight, params.head.bias)


def shape_audit(config, batch=1):
    """Run a zero input through a fresh model and compare every stage shape.

    Returns the list of observed (C, H, W) stage shapes; raises ShapeError
    on any disagreement with the analytic expectation.
    """
    params = init_backbone(config, seed=0)
    got = {n: t.shape for n, t in params.named_parameters()}
    want = expected_param_shapes(config)
    if got != want:
        missing = sorted(set(want) ^ set(got)) or [n for n in want if want[n] != got[n]]
        raise ShapeError(f"parameter shapes disagree with config at {missing[:5]}")
    x = Tensor(np.zeros((batch, config.in_channels, config.input_height, config.input_width)))
    observed = []
    with T.no_grad():
        h = stem_forward(x, params.stem)
        for i, blocks in enumerate(params.stages):
            if i > 0:
                h = patch_embed(h, params.patch_embeds[i - 1])
            for block in blocks:
                h = mecasa_block(h, block)
            observed.append(tuple(h.shape[1:]))
        feats, logits = backbone_forward(x, params)
    expected = expected_feature_shapes(config)
    if observed != expected:
        raise ShapeError(f"stage shapes {observed} != expected {expected}")
    if feats.shape != (batch, config.feature_dim) or logits.shape != (batch, config.num_classes):
        raise ShapeError(f"head shapes {feats.shape}, {logits.shape} unexpected")
    return observed


class MecasaNet:
    """Backbone parameters bundled with the forward pass used for training."""

    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_backbone(config, seed)

    def named_parameters(self):
        return self.params.named_parameters()

    def parameters(self):
        return self.params.parameters()

    def logits(self, x):
        return backbone_forward(T.as_tensor(x), self.params)[1]

    def features(self, x, batch_size=256):
        """Feature vectors for an array of epochs, without recording a graph."""
        x = np.asarray(x)
        out = []
        with T.no_grad():
            for s in range(0, len(x), batch_size):
                out.append(backbone_features(Tensor(x[s : s + batch_size]), self.params).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.feature_dim))
