"""Alternating three-player optimization and the baseline pipeline factory.

Each step runs two phases:
  (a) the attacker takes one or more descent steps on its own loss with the
      censoring frozen (no gradient reaches the censor or user);
  (b) the user descends the utility loss while the censor parameters descend
      lam * utility + sample_loss - privacy_loss in one joint step.

Gradient isolation uses backward(inputs=...), so a phase can share the
forward graph without ever accumulating into the other players' parameters.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
import torch

from .censor import KINDS, CensorModel, distort_batch, sample_invariant_batch
from .core import Dataset, RandomStream
from .geometry import fps
from .nets import (BackboneNet, build_backbone, build_distorter, build_sampler)
from .objectives import (LossBreakdown, attacker_losses_batch, cce,
                         sample_loss_from_terms)

log = logging.getLogger(__name__)

FIXED_SIGMA_GRID = (0.01, 0.05, 0.1, 0.2)
LAMBDA_GRID = (0.1, 0.3, 1.0, 3.0, 10.0)


class NonFiniteLossError(RuntimeError):
    """Training hit a non-finite loss; carries the offending breakdown row."""

    def __init__(self, row: LossBreakdown):
        super().__init__(f"non-finite loss at step {row.step}: {row}")
        self.row = row


@dataclasses.dataclass
class TrainConfig:
    kind: str = "CBNS"
    r: int = 64
    alpha: float = 0.5
    lam: float = 1.0
    granularity: str = "pointwise"
    lr_owner: float = 1e-3
    lr_user: float = 1e-3
    lr_attacker: float = 1e-3
    attacker_steps_per_owner_step: int = 1
    batch_size: int = 32
    total_steps: int = 2000
    seed: int = 0
    fixed_sigma: float = 0.1
    feature_width: int = 256
    soft_k: int = 8
    margin: float = 10.0
    sample_gamma: float = 1.0
    sample_beta: float = 1.0
    eval_every: int = 0  # 0 disables periodic snapshots

    def validate(self) -> list:
        """All problems at once, so a bad config fails before any compute."""
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.r < 1:
            problems.append("r must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha must lie in [0, 1]")
        if self.lam < 0:
            problems.append("lambda must be >= 0")
        if self.granularity not in ("shared", "pointwise"):
            problems.append("granularity must be 'shared' or 'pointwise'")
        for name in ("lr_owner", "lr_user", "lr_attacker"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.attacker_steps_per_owner_step < 1:
            problems.append("attacker_steps_per_owner_step must be >= 1")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2")
        if self.total_steps < 0:
            problems.append("total_steps must be >= 0")
        if self.fixed_sigma < 0:
            problems.append("fixed_sigma must be >= 0")
        if self.feature_width < 1:
            problems.append("feature_width must be >= 1")
        return problems

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclasses.dataclass
class EvalSnapshot:
    step: int
    user_train_acc: float
    attacker_train_acc: float
    user_test_acc: float | None = None
    attacker_test_acc: float | None = None


@dataclasses.dataclass
class TrainHistory:
    rows: list = dataclasses.field(default_factory=list)
    evals: list = dataclasses.field(default_factory=list)

    def write_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(LossBreakdown.CSV_FIELDS)
            for row in self.rows:
                writer.writerow([repr(v) if isinstance(v, float) else v
                                 for v in row.csv_row()])


@dataclasses.dataclass
class ProxyHeads:
    user: BackboneNet
    attacker: BackboneNet


class TrainState:
    """Everything the loop mutates: models, optimizer slots, step counter."""

    def __init__(self, model: CensorModel, heads: ProxyHeads,
                 config: TrainConfig, stream: RandomStream):
        self.model = model
        self.heads = heads
        self.stream = stream
        self.step = 0
        self.owner_params = model.owner_parameters()
        self.user_params = list(heads.user.parameters())
        self.attacker_params = list(heads.attacker.parameters())
        self.owner_opt = (torch.optim.Adam(self.owner_params, lr=config.lr_owner)
                          if self.owner_params else None)
        self.user_opt = torch.optim.Adam(self.user_params, lr=config.lr_user)
        self.attacker_opt = torch.optim.Adam(self.attacker_params, lr=config.lr_attacker)


def make_pipeline(kind: str, config: TrainConfig, rng: RandomStream,
                  d: int = 3) -> CensorModel:
    """Construct the censoring pipeline for one baseline or the full model.

    AS-* variants replace the sampler with deterministic farthest-point
    sampling (no trainable sampler parameters); *-AN variants use fixed
    zero-mean noise at config.fixed_sigma; OS drops noise entirely.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown pipeline kind {kind!r}; expected one of {KINDS}")
    sampler = None
    distorter = None
    if kind in ("CBNS", "OS-AN", "OS"):
        sampler = build_sampler(d, config.r, rng.substream("sampler-init"))
    if kind in ("CBNS", "AS-ON"):
        distorter = build_distorter(d, config.granularity,
                                    rng.substream("distorter-init"))
    return CensorModel(kind, r=config.r, d=d, sampler=sampler,
                       distorter=distorter, fixed_sigma=config.fixed_sigma,
                       soft_k=config.soft_k)


def pick_pairs(batch, rng: np.random.Generator) -> tuple:
    """Uniform positive (same y_s) / negative (different y_s) index per anchor.

    `batch` is a list of LabeledSample or an array of sensitive labels. A
    singleton sensitive class leaves its anchor with itself as positive
    (degenerate, logged); a single-class batch has no negatives and is
    rejected.
    """
    if len(batch) and hasattr(batch[0], "y_s"):
        y_s = np.array([s.y_s for s in batch], dtype=np.int64)
    else:
        y_s = np.asarray(batch, dtype=np.int64)
    if len(np.unique(y_s)) < 2:
        raise ValueError("pair picking needs at least 2 sensitive classes in the batch")
    B = len(y_s)
    pos = np.empty(B, dtype=np.int64)
    neg = np.empty(B, dtype=np.int64)
    for i in range(B):
        same = np.flatnonzero(y_s == y_s[i])
        same = same[same != i]
        diff = np.flatnonzero(y_s != y_s[i])
        if len(same) == 0:
            log.warning("anchor %d is a singleton of sensitive class %d; "
                        "reusing itself as positive", i, y_s[i])
            pos[i] = i
        else:
            pos[i] = same[rng.integers(len(same))]
        neg[i] = diff[rng.integers(len(diff))]
    return pos, neg


def _prepare_batch(batch, dtype):
    """Accepts a LabeledSample list or a prepared (clouds, y_t, y_s[, fps]) tuple."""
    if isinstance(batch, (list, tuple)) and len(batch) and hasattr(batch[0], "cloud"):
        clouds = torch.as_tensor(
            np.stack([s.cloud.points for s in batch]), dtype=dtype)
        y_t = torch.as_tensor([s.y_t for s in batch], dtype=torch.int64)
        y_s = torch.as_tensor([s.y_s for s in batch], dtype=torch.int64)
        return clouds, y_t, y_s, None
    clouds, y_t, y_s = batch[0], batch[1], batch[2]
    fps_idx = batch[3] if len(batch) > 3 else None
    clouds = clouds if isinstance(clouds, torch.Tensor) else torch.as_tensor(clouds, dtype=dtype)
    y_t = torch.as_tensor(np.asarray(y_t), dtype=torch.int64)
    y_s = torch.as_tensor(np.asarray(y_s), dtype=torch.int64)
    return clouds, y_t, y_s, fps_idx


def train_step(state: TrainState, batch, config: TrainConfig) -> tuple:
    """One alternating step; returns (state, LossBreakdown of the owner phase)."""
    model = state.model
    clouds, y_t, y_s, fps_idx = _prepare_batch(batch, model.dtype)
    y_s_np = y_s.numpy()
    pair_rng = state.stream.substream("pair-pick", state.step)
    noise_rng = state.stream.substream("noise-draw", state.step)

    # The censor parameters do not move during the attacker phase, so one
    # differentiable censor forward serves both phases; the attacker sees it
    # detached.
    out = sample_invariant_batch(model, clouds, "train", fps_indices=fps_idx)
    censored = distort_batch(model, out.p_s, noise_rng, "train")
    frozen = censored.detach()

    # (a) attacker phase: only theta_A moves
    for _ in range(config.attacker_steps_per_owner_step):
        pos, neg = pick_pairs(y_s_np, pair_rng)
        l_a, _, _ = attacker_losses_batch(state.heads.attacker, frozen, y_s,
                                          pos, neg, config.alpha, config.margin)
        state.attacker_opt.zero_grad()
        l_a.backward(inputs=state.attacker_params)
        state.attacker_opt.step()

    # (b) owner/user phase: one joint step, theta_A untouched
    l_util = cce(state.heads.user(censored), y_t).mean()
    pos, neg = pick_pairs(y_s_np, pair_rng)
    l_priv, l_cce_a, l_aco = attacker_losses_batch(
        state.heads.attacker, censored, y_s, pos, neg, config.alpha, config.margin)
    l_sample = sample_loss_from_terms(out.sample_loss_terms,
                                      config.sample_gamma, config.sample_beta)
    total_owner = config.lam * l_util - l_priv + l_sample

    row = LossBreakdown(step=state.step,
                        l_util=float(l_util.detach()), l_priv=float(l_priv.detach()),
                        l_cce_attacker=float(l_cce_a.detach()),
                        l_aco=float(l_aco.detach()),
                        l_sample=float(l_sample.detach()),
                        total_owner=float(total_owner.detach()))
    if not row.is_finite():
        raise NonFiniteLossError(row)

    state.user_opt.zero_grad()
    if state.owner_opt is not None:
        state.owner_opt.zero_grad()
    l_util.backward(inputs=state.user_params, retain_graph=state.owner_opt is not None)
    if state.owner_opt is not None:
        total_owner.backward(inputs=state.owner_params)
        state.owner_opt.step()
    state.user_opt.step()

    state.step += 1
    return state, row


def _accuracy(net: BackboneNet, clouds: torch.Tensor, labels: torch.Tensor,
              chunk: int = 256) -> float:
    hits = 0
    with torch.no_grad():
        for i in range(0, len(clouds), chunk):
            pred = net(clouds[i:i + chunk]).argmax(dim=-1)
            hits += int((pred == labels[i:i + chunk]).sum())
    return hits / len(clouds)


def _snapshot(state: TrainState, config: TrainConfig, train_arrays, test_arrays) -> EvalSnapshot:
    def censored_eval(arrays, limit=256):
        clouds, y_t, y_s, fps_idx = arrays
        clouds, y_t, y_s = clouds[:limit], y_t[:limit], y_s[:limit]
        fps_idx = fps_idx[:limit] if fps_idx is not None else None
        gen = state.stream.substream("noise-draw", (1 << 32) + state.step)
        with torch.no_grad():
            out = sample_invariant_batch(state.model, clouds, "release",
                                         fps_indices=fps_idx)
            censored = distort_batch(state.model, out.p_s, gen, "release")
        return (censored, y_t, y_s)

    c_train, y_t_tr, y_s_tr = censored_eval(train_arrays)
    snap = EvalSnapshot(
        step=state.step,
        user_train_acc=_accuracy(state.heads.user, c_train, y_t_tr),
        attacker_train_acc=_accuracy(state.heads.attacker, c_train, y_s_tr),
    )
    if test_arrays is not None:
        c_test, y_t_te, y_s_te = censored_eval(test_arrays)
        snap.user_test_acc = _accuracy(state.heads.user, c_test, y_t_te)
        snap.attacker_test_acc = _accuracy(state.heads.attacker, c_test, y_s_te)
    return snap


def _stack_arrays(dataset: Dataset, model: CensorModel):
    clouds = torch.as_tensor(dataset.clouds(), dtype=model.dtype)
    y_t = torch.as_tensor(dataset.task_labels())
    y_s = torch.as_tensor(dataset.sensitive_labels())
    fps_idx = None
    if model.sampler_mode == "fps":
        fps_idx = np.stack([fps(dataset.samples[i].cloud, model.r, start=0)
                            for i in range(len(dataset))])
    return clouds, y_t, y_s, fps_idx


def train(config: TrainConfig, train_set: Dataset,
          test_set: Dataset | None = None) -> tuple:
    """Run the full loop; returns (CensorModel, ProxyHeads, TrainHistory)."""
    problems = config.validate()
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    if config.kind != "NO-PRIVACY" and train_set.n < config.r:
        raise ValueError(f"r={config.r} exceeds dataset point count n={train_set.n}")

    stream = RandomStream(config.seed)
    model = make_pipeline(config.kind, config, stream, d=train_set.d)
    heads = ProxyHeads(
        user=build_backbone(train_set.d, config.feature_width,
                            len(train_set.task_classes),
                            stream.substream("user-init")),
        attacker=build_backbone(train_set.d, config.feature_width,
                                len(train_set.sensitive_classes),
                                stream.substream("attacker-init")),
    )
    state = TrainState(model, heads, config, stream)
    history = TrainHistory()

    train_arrays = _stack_arrays(train_set, model)
    test_arrays = _stack_arrays(test_set, model) if test_set is not None else None
    clouds_all, y_t_all, y_s_all, fps_all = train_arrays
    N = len(train_set)
    data_rng = stream.substream("data")

    for _ in range(config.total_steps):
        # redraw (rarely) until the batch spans >= 2 sensitive classes
        for _attempt in range(20):
            idx = data_rng.choice(N, size=min(config.batch_size, N),
                                  replace=N < config.batch_size)
            if len(np.unique(y_s_all.numpy()[idx])) >= 2:
                break
        else:
            raise RuntimeError("could not draw a batch with >= 2 sensitive classes")
        batch = (clouds_all[idx], y_t_all[idx], y_s_all[idx],
                 fps_all[idx] if fps_all is not None else None)
        state, row = train_step(state, batch, config)
        history.rows.append(row)
        if config.eval_every and state.step % config.eval_every == 0:
            history.evals.append(_snapshot(state, config, train_arrays, test_arrays))

    return model, heads, history
