"""Networks: permutation-invariant classifier, point generator, noise heads.

The classifier backbone applies a shared per-point MLP followed by a
coordinatewise max pool, which makes its outputs exactly invariant to point
permutation by construction. Normalization is per-point LayerNorm rather than
batch statistics so every forward pass is a pure function of (parameters,
input) — there is no train/eval mode distinction anywhere in this module.

All parameters are initialized from a caller-supplied numpy generator
(fan-in-scaled uniform, matching the usual Linear default), so two builds
from the same substream are parameter-identical regardless of torch's global
RNG state.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .geometry import as_tensor

SIGMA_MIN = 1e-4
SIGMA_MAX = 2.0

GRANULARITIES = ("shared", "pointwise")


def _init_linear(layer: nn.Linear, rng: np.random.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    w = rng.uniform(-bound, bound, size=(layer.out_features, layer.in_features))
    b = rng.uniform(-bound, bound, size=layer.out_features)
    with torch.no_grad():
        layer.weight.copy_(torch.as_tensor(w, dtype=layer.weight.dtype))
        layer.bias.copy_(torch.as_tensor(b, dtype=layer.bias.dtype))


def _init_module(module: nn.Module, rng: np.random.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            _init_linear(m, rng)


def _point_mlp(widths, dtype) -> nn.Sequential:
    layers = []
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        layers += [nn.Linear(w_in, w_out, dtype=dtype),
                   nn.LayerNorm(w_out, dtype=dtype),
                   nn.ReLU()]
    return nn.Sequential(*layers)


class BackboneNet(nn.Module):
    """Shared per-point encoder, max pool, classification head.

    Houses both the user and attacker proxies; `encode` exposes the pooled
    pre-head feature used by the contrastive loss.
    """

    def __init__(self, d: int = 3, feature_width: int = 256, num_classes: int = 4,
                 encoder_hidden=(64, 128), head_width: int = 128,
                 dtype=torch.float32):
        super().__init__()
        if min(d, feature_width, num_classes) < 1:
            raise ValueError("all sizes must be >= 1")
        self.d = d
        self.feature_width = feature_width
        self.num_classes = num_classes
        self.encoder_hidden = tuple(encoder_hidden)
        self.head_width = head_width
        self.encoder = _point_mlp((d, *encoder_hidden, feature_width), dtype)
        self.head = nn.Sequential(
            nn.Linear(feature_width, head_width, dtype=dtype),
            nn.LayerNorm(head_width, dtype=dtype),
            nn.ReLU(),
            nn.Linear(head_width, num_classes, dtype=dtype),
        )

    def point_features(self, clouds: torch.Tensor) -> torch.Tensor:
        """(B, n, d) -> (B, n, F) per-point features before pooling."""
        return self.encoder(clouds)

    def encode(self, clouds: torch.Tensor) -> torch.Tensor:
        """(B, n, d) -> (B, F) permutation-invariant global feature."""
        return self.point_features(clouds).amax(dim=-2)

    def forward(self, clouds: torch.Tensor) -> torch.Tensor:
        return self.head(self.encode(clouds))

    def hyperparams(self) -> dict:
        return {"d": self.d, "feature_width": self.feature_width,
                "num_classes": self.num_classes,
                "encoder_hidden": list(self.encoder_hidden),
                "head_width": self.head_width}


class SamplerNet(nn.Module):
    """Invariant point sampler: pooled global code -> r generated points.

    The generated points are raw; soft projection (training) or hard matching
    (release) constrains them back onto the input set. The projection
    temperature is a learned scalar kept positive through softplus.
    """

    def __init__(self, d: int = 3, r: int = 64, encoder_widths=(64, 128, 128),
                 generator_widths=(256, 256), dtype=torch.float32):
        super().__init__()
        self.d = d
        self.r = r
        self.encoder_widths = tuple(encoder_widths)
        self.generator_widths = tuple(generator_widths)
        self.encoder = _point_mlp((d, *encoder_widths), dtype)
        gen_layers = []
        widths = (encoder_widths[-1], *generator_widths)
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            gen_layers += [nn.Linear(w_in, w_out, dtype=dtype), nn.ReLU()]
        gen_layers.append(nn.Linear(widths[-1], r * d, dtype=dtype))
        self.generator = nn.Sequential(*gen_layers)
        # softplus(raw) == 1.0 at init
        init_raw = math.log(math.expm1(1.0))
        self.raw_temperature = nn.Parameter(torch.tensor(init_raw, dtype=dtype))

    @property
    def temperature(self) -> torch.Tensor:
        return nn.functional.softplus(self.raw_temperature)

    def encode(self, clouds: torch.Tensor) -> torch.Tensor:
        return self.encoder(clouds).amax(dim=-2)

    def forward(self, clouds: torch.Tensor) -> torch.Tensor:
        """(B, n, d) -> (B, r, d) raw generated points."""
        code = self.encode(clouds)
        flat = self.generator(code)
        return flat.reshape(*flat.shape[:-1], self.r, self.d)

    def hyperparams(self) -> dict:
        return {"d": self.d, "r": self.r,
                "encoder_widths": list(self.encoder_widths),
                "generator_widths": list(self.generator_widths)}


class DistorterNet(nn.Module):
    """Maps sampled points to Gaussian noise parameters (mu, sigma).

    Each sampled point is encoded by a shared MLP and pooled into a global
    context code, so the noise is conditioned on both the point itself and the
    whole sampled cloud. Granularity:
      - pointwise: an (r, d) pair of (mu, sigma) per point,
      - shared: a single (1, d) pair broadcast to all r points.
    sigma = exp(clamped log-sigma) stays within [SIGMA_MIN, SIGMA_MAX].
    """

    def __init__(self, d: int = 3, granularity: str = "pointwise",
                 encoder_widths=(64, 128), head_width: int = 128,
                 init_sigma: float = 0.1, dtype=torch.float32):
        super().__init__()
        if granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        self.d = d
        self.granularity = granularity
        self.encoder_widths = tuple(encoder_widths)
        self.head_width = head_width
        self.init_sigma = init_sigma
        self.encoder = _point_mlp((d, *encoder_widths), dtype)
        code = encoder_widths[-1]
        head_in = code * 2 if granularity == "pointwise" else code
        self.head = nn.Sequential(
            nn.Linear(head_in, head_width, dtype=dtype),
            nn.ReLU(),
            nn.Linear(head_width, 2 * d, dtype=dtype),
        )

    def forward(self, sampled: torch.Tensor) -> tuple:
        """(B, r, d) -> (mu, sigma), each (B, r, d) pointwise or (B, 1, d) shared."""
        feats = self.encoder(sampled)                     # (B, r, W)
        context = feats.amax(dim=-2)                      # (B, W)
        if self.granularity == "pointwise":
            ctx = context.unsqueeze(-2).expand_as(feats)
            out = self.head(torch.cat([feats, ctx], dim=-1))   # (B, r, 2d)
        else:
            out = self.head(context).unsqueeze(-2)             # (B, 1, 2d)
        mu, log_sigma = out.split(self.d, dim=-1)
        sigma = torch.exp(torch.clamp(log_sigma,
                                      math.log(SIGMA_MIN), math.log(SIGMA_MAX)))
        return mu, sigma

    def hyperparams(self) -> dict:
        return {"d": self.d, "granularity": self.granularity,
                "encoder_widths": list(self.encoder_widths),
                "head_width": self.head_width, "init_sigma": self.init_sigma}


def build_backbone(d: int, feature_width: int, num_classes: int,
                   rng: np.random.Generator, dtype=torch.float32,
                   **kwargs) -> BackboneNet:
    """Freshly initialized backbone; parameter-identical given the same substream."""
    net = BackboneNet(d=d, feature_width=feature_width, num_classes=num_classes,
                      dtype=dtype, **kwargs)
    _init_module(net, rng)
    return net


def build_sampler(d: int, r: int, rng: np.random.Generator,
                  dtype=torch.float32, **kwargs) -> SamplerNet:
    net = SamplerNet(d=d, r=r, dtype=dtype, **kwargs)
    _init_module(net, rng)
    return net


def build_distorter(d: int, granularity: str, rng: np.random.Generator,
                    dtype=torch.float32, **kwargs) -> DistorterNet:
    net = DistorterNet(d=d, granularity=granularity, dtype=dtype, **kwargs)
    _init_module(net, rng)
    # start from modest noise: bias the log-sigma outputs toward init_sigma
    with torch.no_grad():
        net.head[-1].bias[net.d:] += math.log(net.init_sigma)
    return net


def _batchify(cloud, dtype) -> tuple:
    t = as_tensor(cloud, dtype)
    if t.ndim == 2:
        return t.unsqueeze(0), True
    return t, False


def encode(net: BackboneNet, cloud) -> torch.Tensor:
    """Pooled pre-head feature of one cloud (or a batch of clouds)."""
    t, single = _batchify(cloud, next(net.parameters()).dtype)
    out = net.encode(t)
    return out.squeeze(0) if single else out


def classify(net: BackboneNet, cloud) -> torch.Tensor:
    """Class logits of one cloud (or a batch of clouds)."""
    t, single = _batchify(cloud, next(net.parameters()).dtype)
    out = net(t)
    return out.squeeze(0) if single else out


def generate_points(net: SamplerNet, cloud) -> torch.Tensor:
    """Raw (pre-projection) generated points for one cloud or a batch."""
    t, single = _batchify(cloud, next(net.parameters()).dtype)
    out = net(t)
    return out.squeeze(0) if single else out


def noise_params(net: DistorterNet, sampled) -> tuple:
    """(mu, sigma) for a sampled cloud or a batch of sampled clouds."""
    t, single = _batchify(sampled, next(net.parameters()).dtype)
    mu, sigma = net(t)
    if single:
        return mu.squeeze(0), sigma.squeeze(0)
    return mu, sigma
