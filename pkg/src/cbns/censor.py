"""The censoring pipeline: invariant sampling composed with noisy distortion.

A CensorModel carries the learned sampler and distorter (when its kind has
them) plus the composition rules. Training mode keeps everything
differentiable (soft projection, reparameterized noise); release mode selects
actual input points and adds an independently seeded noise draw.

Pipeline kinds:
  CBNS        learned sampler + learned noise
  AS-AN       farthest-point sampling + fixed gaussian noise
  AS-ON       farthest-point sampling + learned noise
  OS-AN       learned sampler + fixed gaussian noise
  OS          learned sampler, no noise
  NO-PRIVACY  identity (clouds pass through unchanged)
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import zipfile

import numpy as np
import torch

from .core import Dataset, PointCloud, RandomStream
from .geometry import as_tensor, chamfer_terms, fps, match_hard, soft_project
from .nets import DistorterNet, SamplerNet

KINDS = ("CBNS", "AS-AN", "AS-ON", "OS-AN", "OS", "NO-PRIVACY")

#: kind -> (sampler mode, noise mode)
_PIPELINES = {
    "CBNS": ("learned", "learned"),
    "AS-AN": ("fps", "fixed"),
    "AS-ON": ("fps", "learned"),
    "OS-AN": ("learned", "fixed"),
    "OS": ("learned", "none"),
    "NO-PRIVACY": ("identity", "none"),
}

MODES = ("train", "release")


@dataclasses.dataclass
class SamplerOutput:
    """Result of the sampling stage; tensors may carry a leading batch dim."""

    p_s: torch.Tensor
    raw: torch.Tensor
    temperature: torch.Tensor
    sample_loss_terms: tuple  # (avg chamfer, max chamfer, temperature^2)


class CensorModel:
    """Trainable censoring transformation: r-point sampling then distortion."""

    def __init__(self, kind: str, r: int, d: int = 3,
                 sampler: SamplerNet | None = None,
                 distorter: DistorterNet | None = None,
                 fixed_sigma: float = 0.1, soft_k: int = 8):
        if kind not in KINDS:
            raise ValueError(f"unknown pipeline kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.sampler_mode, self.noise_mode = _PIPELINES[kind]
        if (self.sampler_mode == "learned") != (sampler is not None):
            raise ValueError(f"kind {kind} {'requires' if sampler is None else 'forbids'} a sampler net")
        if (self.noise_mode == "learned") != (distorter is not None):
            raise ValueError(f"kind {kind} {'requires' if distorter is None else 'forbids'} a distorter net")
        self.r = r
        self.d = d
        self.sampler = sampler
        self.distorter = distorter
        self.fixed_sigma = float(fixed_sigma)
        self.soft_k = soft_k

    @property
    def granularity(self) -> str | None:
        return self.distorter.granularity if self.distorter is not None else None

    @property
    def dtype(self):
        for net in (self.sampler, self.distorter):
            if net is not None:
                return next(net.parameters()).dtype
        return torch.float32

    def owner_parameters(self) -> list:
        """All trainable censoring parameters (theta_S union theta_D)."""
        params: list = []
        if self.sampler is not None:
            params.extend(self.sampler.parameters())
        if self.distorter is not None:
            params.extend(self.distorter.parameters())
        return params


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def sample_invariant_batch(model: CensorModel, clouds: torch.Tensor, mode: str,
                           fps_indices: np.ndarray | None = None) -> SamplerOutput:
    """Sampling stage over a (B, n, d) batch.

    Train mode with a learned sampler generates points and soft-projects them
    onto the input; release mode hard-matches onto distinct input points.
    """
    _check_mode(mode)
    B, n, d = clouds.shape
    zero = torch.zeros((), dtype=clouds.dtype)
    zeros_b = torch.zeros(B, dtype=clouds.dtype)

    if model.sampler_mode == "identity":
        return SamplerOutput(p_s=clouds, raw=clouds, temperature=zero,
                             sample_loss_terms=(zeros_b, zeros_b, zero))

    if n < model.r:
        raise ValueError(f"cannot sample r={model.r} points from clouds of n={n}")

    if model.sampler_mode == "fps":
        if fps_indices is None:
            fps_indices = np.stack([fps(clouds[b], model.r, start=0) for b in range(B)])
        idx = torch.as_tensor(fps_indices, dtype=torch.int64)
        p_s = torch.gather(clouds, 1, idx.unsqueeze(-1).expand(B, model.r, d))
        return SamplerOutput(p_s=p_s, raw=p_s, temperature=zero,
                             sample_loss_terms=(zeros_b, zeros_b, zero))

    # learned sampler
    if mode == "train":
        raw = model.sampler(clouds)
        temperature = model.sampler.temperature
        p_s, _ = soft_project(raw, clouds, temperature, k=model.soft_k)
        avg, mx = chamfer_terms(raw, clouds)
        return SamplerOutput(p_s=p_s, raw=raw, temperature=temperature,
                             sample_loss_terms=(avg, mx, temperature ** 2))
    with torch.no_grad():
        raw = model.sampler(clouds)
        temperature = model.sampler.temperature
        matched = np.stack([match_hard(raw[b], clouds[b]) for b in range(B)])
        idx = torch.as_tensor(matched, dtype=torch.int64)
        p_s = torch.gather(clouds, 1, idx.unsqueeze(-1).expand(B, model.r, d))
        avg, mx = chamfer_terms(raw, clouds)
        return SamplerOutput(p_s=p_s, raw=raw, temperature=temperature,
                             sample_loss_terms=(avg, mx, temperature ** 2))


def sample_invariant(model: CensorModel, cloud, mode: str) -> SamplerOutput:
    """Single-cloud sampling stage; see sample_invariant_batch."""
    clouds = as_tensor(cloud, model.dtype).unsqueeze(0)
    out = sample_invariant_batch(model, clouds, mode)
    avg, mx, t2 = out.sample_loss_terms
    return SamplerOutput(p_s=out.p_s.squeeze(0), raw=out.raw.squeeze(0),
                         temperature=out.temperature,
                         sample_loss_terms=(avg.squeeze(0), mx.squeeze(0), t2))


def _draw_eps(rng: np.random.Generator, shape, dtype) -> torch.Tensor:
    eps = rng.standard_normal(shape)
    return torch.as_tensor(eps, dtype=dtype)


def distort_batch(model: CensorModel, p_s: torch.Tensor, rng, mode: str,
                  eps: torch.Tensor | None = None) -> torch.Tensor:
    """Noise stage over a (B, r, d) batch of sampled clouds.

    Train mode keeps the reparameterized form p_s + mu + sigma * eps in the
    graph so gradients reach mu and sigma; release mode detaches. `eps`
    overrides the draw (tests freeze it for finite-difference audits).
    """
    _check_mode(mode)
    if model.noise_mode == "none":
        return p_s
    gen = rng.substream("noise-draw") if isinstance(rng, RandomStream) else rng
    if eps is None:
        eps = _draw_eps(gen, tuple(p_s.shape), p_s.dtype)
    if model.noise_mode == "fixed":
        out = p_s + model.fixed_sigma * eps
        return out.detach() if mode == "release" else out
    mu, sigma = model.distorter(p_s)
    out = p_s + mu + sigma * eps
    return out.detach() if mode == "release" else out


def distort(model: CensorModel, sampler_out: SamplerOutput, rng, mode: str,
            eps: torch.Tensor | None = None) -> torch.Tensor:
    """Single-cloud noise stage; returns the (r, d) censored cloud tensor."""
    p_s = sampler_out.p_s
    single = p_s.ndim == 2
    batch = p_s.unsqueeze(0) if single else p_s
    out = distort_batch(model, batch, rng, mode, eps=eps)
    return out.squeeze(0) if single else out


def censor(model: CensorModel, cloud, rng) -> PointCloud:
    """Release-mode censoring of one cloud: hard selection plus seeded noise."""
    gen = rng.substream("noise-draw") if isinstance(rng, RandomStream) else rng
    with torch.no_grad():
        out = sample_invariant(model, cloud, "release")
        censored = distort(model, out, gen, "release")
    return PointCloud(censored.numpy().astype(np.float32))


def censor_dataset(model: CensorModel, dataset: Dataset, seed: int) -> Dataset:
    """Censor every sample with a substream derived from (seed, sample index).

    Per-sample derivation makes the result independent of evaluation order, so
    parallel fan-out would produce the same dataset as this serial loop.
    """
    stream = RandomStream(seed)
    clouds = []
    for i, sample in enumerate(dataset.samples):
        gen = stream.substream("noise-draw", i)
        clouds.append(censor(model, sample.cloud, gen))
    return dataset.replace_clouds(clouds)


# ---------------------------------------------------------------------------
# Checkpoint archive: header.json + named parameter arrays, loadable to a
# forward-pass-identical model on the same platform.

CHECKPOINT_FORMAT = "cbns-checkpoint-v1"


def save_checkpoint(path, model: CensorModel, extra: dict | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "r": model.r,
        "d": model.d,
        "fixed_sigma": model.fixed_sigma,
        "soft_k": model.soft_k,
        "sampler": model.sampler.hyperparams() if model.sampler else None,
        "distorter": model.distorter.hyperparams() if model.distorter else None,
    }
    if extra:
        header["extra"] = extra
    arrays = {}
    for prefix, net in (("sampler", model.sampler), ("distorter", model.distorter)):
        if net is None:
            continue
        for name, tensor in net.state_dict().items():
            arrays[f"{prefix}.{name}"] = tensor.detach().numpy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=2, sort_keys=True))
        zf.writestr("params.npz", buf.getvalue())


def load_checkpoint(path) -> CensorModel:
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a recognized checkpoint: {path}")
        with np.load(io.BytesIO(zf.read("params.npz"))) as npz:
            arrays = {k: npz[k] for k in npz.files}

    sampler = None
    if header["sampler"] is not None:
        hp = header["sampler"]
        sampler = SamplerNet(d=hp["d"], r=hp["r"],
                             encoder_widths=tuple(hp["encoder_widths"]),
                             generator_widths=tuple(hp["generator_widths"]))
    distorter = None
    if header["distorter"] is not None:
        hp = header["distorter"]
        distorter = DistorterNet(d=hp["d"], granularity=hp["granularity"],
                                 encoder_widths=tuple(hp["encoder_widths"]),
                                 head_width=hp["head_width"],
                                 init_sigma=hp["init_sigma"])
    model = CensorModel(header["kind"], r=header["r"], d=header["d"],
                        sampler=sampler, distorter=distorter,
                        fixed_sigma=header["fixed_sigma"], soft_k=header["soft_k"])
    for prefix, net in (("sampler", sampler), ("distorter", distorter)):
        if net is None:
            continue
        state = {k[len(prefix) + 1:]: torch.as_tensor(v)
                 for k, v in arrays.items() if k.startswith(prefix + ".")}
        net.load_state_dict(state)
    return model


def checkpoint_hash(path) -> str:
    """Content hash used by dataset manifests to record provenance."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
