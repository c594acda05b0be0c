"""Evaluation protocol: offline attacker, utility, sweeps, Pareto scoring.

Privacy is the test accuracy of an offline attacker (pretrained on raw data,
fine-tuned on the censored release) predicting the sensitive label — lower is
better. Utility is the test accuracy of a fresh user trained only on the
censored release predicting the task label — higher is better. A sweep traces
(privacy, utility) points over hyperparameter grids; the normalized
hypervolume of the Pareto front against reference (privacy 1, utility 0)
scores the whole trade-off curve.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import pathlib

import numpy as np
import torch

from .censor import CensorModel, censor_dataset
from .core import Dataset, RandomStream
from .nets import BackboneNet, build_backbone
from .objectives import cce
from .training import TrainConfig, make_pipeline, train

log = logging.getLogger(__name__)

NHV_REFERENCE = (1.0, 0.0)


@dataclasses.dataclass(frozen=True)
class TradeoffPoint:
    privacy: float
    utility: float
    config_id: str = ""
    seed: int = 0
    lam: float | None = None
    sigma: float | None = None
    kind: str = ""


@dataclasses.dataclass(frozen=True)
class ParetoReport:
    points: tuple
    front: tuple
    nhv: float
    reference: tuple = NHV_REFERENCE

    def to_dict(self) -> dict:
        def row(p):
            return {"privacy": p.privacy, "utility": p.utility,
                    "config_id": p.config_id, "seed": p.seed,
                    "lambda": p.lam, "sigma": p.sigma, "kind": p.kind}
        return {"points": [row(p) for p in self.points],
                "front": [row(p) for p in self.front],
                "nhv": self.nhv,
                "reference": list(self.reference)}


@dataclasses.dataclass(frozen=True)
class CriticalSet:
    """Input points that win at least one max-pooled feature dimension."""

    indices: np.ndarray   # ranked by number of dimensions won, descending
    win_counts: np.ndarray


# ---------------------------------------------------------------------------
# Classifier training used by both evaluation arms and the premise analysis.

def _train_classifier(net: BackboneNet, clouds: torch.Tensor, labels: torch.Tensor,
                      steps: int, rng: np.random.Generator,
                      batch_size: int = 32, lr: float = 1e-3) -> BackboneNet:
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    N = len(clouds)
    for _ in range(steps):
        idx = rng.choice(N, size=min(batch_size, N), replace=N < batch_size)
        loss = cce(net(clouds[idx]), labels[idx]).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net


def accuracy(net: BackboneNet, clouds: torch.Tensor, labels: torch.Tensor,
             chunk: int = 256) -> float:
    hits = 0
    with torch.no_grad():
        for i in range(0, len(clouds), chunk):
            pred = net(clouds[i:i + chunk]).argmax(dim=-1)
            hits += int((pred == labels[i:i + chunk]).sum())
    return hits / len(clouds)


def _tensors(dataset: Dataset) -> tuple:
    return (torch.as_tensor(dataset.clouds()),
            torch.as_tensor(dataset.task_labels()),
            torch.as_tensor(dataset.sensitive_labels()))


def pretrain_attacker(train_set: Dataset, stream: RandomStream,
                      steps: int = 1000, feature_width: int = 256,
                      batch_size: int = 32, lr: float = 1e-3) -> BackboneNet:
    """Fresh backbone trained on the UNCENSORED split to predict y_s.

    Exposed separately so sweeps can pretrain once per seed and share it
    across grid cells (the pretraining never sees the censor under test).
    """
    clouds, _, y_s = _tensors(train_set)
    net = build_backbone(train_set.d, feature_width,
                         len(train_set.sensitive_classes),
                         stream.substream("attacker-init"))
    return _train_classifier(net, clouds, y_s, steps,
                             stream.substream("data", 1),
                             batch_size=batch_size, lr=lr)


def offline_attack(censor: CensorModel, train_set: Dataset, test_set: Dataset,
                   rng: RandomStream, pretrain_steps: int = 1000,
                   finetune_steps: int = 1000, feature_width: int = 256,
                   batch_size: int = 32, lr: float = 1e-3,
                   pretrained: BackboneNet | None = None) -> float:
    """Worst-case adaptive leakage estimate; returns privacy in [0, 1].

    Pipeline: pretrain a fresh attacker on raw data, censor both splits with
    fixed seeds, fine-tune on the censored train split, score on the censored
    test split. Never shares parameters with any training-time proxy.
    """
    if pretrained is None:
        attacker = pretrain_attacker(train_set, rng, steps=pretrain_steps,
                                     feature_width=feature_width,
                                     batch_size=batch_size, lr=lr)
    else:
        attacker = copy.deepcopy(pretrained)

    censored_train = censor_dataset(censor, train_set, rng.derive_seed("noise-draw", 1))
    censored_test = censor_dataset(censor, test_set, rng.derive_seed("noise-draw", 2))

    clouds_tr, _, y_s_tr = _tensors(censored_train)
    _train_classifier(attacker, clouds_tr, y_s_tr, finetune_steps,
                      rng.substream("data", 2), batch_size=batch_size, lr=lr)
    clouds_te, _, y_s_te = _tensors(censored_test)
    return accuracy(attacker, clouds_te, y_s_te)


def measure_utility(censor: CensorModel, train_set: Dataset, test_set: Dataset,
                    rng: RandomStream, train_steps: int = 1000,
                    feature_width: int = 256, batch_size: int = 32,
                    lr: float = 1e-3) -> float:
    """Fresh user trained from scratch on the censored train split; returns
    its task accuracy on the censored test split."""
    censored_train = censor_dataset(censor, train_set, rng.derive_seed("noise-draw", 1))
    censored_test = censor_dataset(censor, test_set, rng.derive_seed("noise-draw", 2))

    user = build_backbone(train_set.d, feature_width,
                          len(train_set.task_classes),
                          rng.substream("user-init"))
    clouds_tr, y_t_tr, _ = _tensors(censored_train)
    _train_classifier(user, clouds_tr, y_t_tr, train_steps,
                      rng.substream("data", 3), batch_size=batch_size, lr=lr)
    clouds_te, y_t_te, _ = _tensors(censored_test)
    return accuracy(user, clouds_te, y_t_te)


# ---------------------------------------------------------------------------
# Sweeps

def sweep_cells(kind: str, lambda_grid, sigma_grid) -> list:
    """(lam, sigma) hyperparameter cells appropriate for one pipeline kind."""
    if kind in ("CBNS", "AS-ON", "OS"):
        return [(float(lam), None) for lam in lambda_grid]
    if kind == "OS-AN":
        return [(float(lam), float(sig)) for lam in lambda_grid for sig in sigma_grid]
    if kind == "AS-AN":
        return [(None, float(sig)) for sig in sigma_grid]
    if kind == "NO-PRIVACY":
        return [(None, None)]
    raise ValueError(f"unknown pipeline kind {kind!r}")


def cell_id(kind: str, lam, sigma) -> str:
    parts = [kind]
    if lam is not None:
        parts.append(f"lam{lam:g}")
    if sigma is not None:
        parts.append(f"sig{sigma:g}")
    return "-".join(parts)


def _eval_stream(seed: int) -> RandomStream:
    # evaluation randomness independent of the training stream for this seed
    return RandomStream(RandomStream(seed).derive_seed("data", 1 << 20))


def run_cell(kind: str, lam, sigma, seed: int, base_config: TrainConfig,
             train_set: Dataset, test_set: Dataset,
             pretrained: BackboneNet | None = None,
             pretrain_steps: int = 1000, finetune_steps: int = 1000,
             utility_steps: int = 1000) -> TradeoffPoint:
    """Train (when the cell has trainable censor parameters) and evaluate."""
    cfg = dataclasses.replace(base_config, kind=kind, seed=seed)
    if lam is not None:
        cfg = dataclasses.replace(cfg, lam=lam)
    if sigma is not None:
        cfg = dataclasses.replace(cfg, fixed_sigma=sigma)

    if kind in ("AS-AN", "NO-PRIVACY"):
        model = make_pipeline(kind, cfg, RandomStream(cfg.seed), d=train_set.d)
    else:
        model, _, _ = train(cfg, train_set)

    stream = _eval_stream(cfg.seed)
    privacy = offline_attack(model, train_set, test_set, stream,
                             pretrain_steps=pretrain_steps,
                             finetune_steps=finetune_steps,
                             feature_width=cfg.feature_width,
                             pretrained=pretrained)
    utility = measure_utility(model, train_set, test_set, stream,
                              train_steps=utility_steps,
                              feature_width=cfg.feature_width)
    return TradeoffPoint(privacy=privacy, utility=utility,
                         config_id=cell_id(kind, lam, sigma), seed=seed,
                         lam=lam, sigma=sigma, kind=kind)


def sweep(base_config: TrainConfig, lambda_grid, sigma_grid, seeds,
          train_set: Dataset, test_set: Dataset, kinds=("CBNS",),
          out_dir=None, pretrain_steps: int = 1000, finetune_steps: int = 1000,
          utility_steps: int = 1000, include_no_privacy: bool = True) -> tuple:
    """Grid x seed sweep over one or more pipeline kinds.

    Returns (points, errors). The NO-PRIVACY anchor is always included unless
    disabled. When out_dir is given, each completed cell writes a small JSON
    manifest and reruns skip cells whose manifest already exists. Failures are
    recorded and the sweep continues.
    """
    if not list(lambda_grid) or not list(seeds):
        raise ValueError("lambda_grid and seeds must be non-empty")
    cell_dir = None
    if out_dir is not None:
        cell_dir = pathlib.Path(out_dir) / "cells"
        cell_dir.mkdir(parents=True, exist_ok=True)

    all_kinds = list(kinds)
    if include_no_privacy and "NO-PRIVACY" not in all_kinds:
        all_kinds.append("NO-PRIVACY")

    jobs = []
    for kind in all_kinds:
        for lam, sigma in sweep_cells(kind, lambda_grid, sigma_grid):
            for seed in seeds:
                jobs.append((kind, lam, sigma, int(seed)))

    pretrained_cache: dict = {}
    points: list = []
    errors: list = []
    for kind, lam, sigma, seed in jobs:
        cid = cell_id(kind, lam, sigma)
        cell_path = (cell_dir / f"{cid}-s{seed}.json") if cell_dir else None
        if cell_path is not None and cell_path.exists():
            with open(cell_path) as f:
                rec = json.load(f)
            points.append(TradeoffPoint(privacy=rec["privacy"], utility=rec["utility"],
                                        config_id=rec["config_id"], seed=rec["seed"],
                                        lam=rec["lambda"], sigma=rec["sigma"],
                                        kind=rec["kind"]))
            log.info("sweep: reusing completed cell %s-s%d", cid, seed)
            continue
        if seed not in pretrained_cache:
            pretrained_cache[seed] = pretrain_attacker(
                train_set, _eval_stream(seed), steps=pretrain_steps,
                feature_width=base_config.feature_width)
        try:
            point = run_cell(kind, lam, sigma, seed, base_config,
                             train_set, test_set,
                             pretrained=pretrained_cache[seed],
                             pretrain_steps=pretrain_steps,
                             finetune_steps=finetune_steps,
                             utility_steps=utility_steps)
        except Exception as exc:  # record and continue with remaining cells
            log.exception("sweep cell %s-s%d failed", cid, seed)
            errors.append((cid, seed, str(exc)))
            continue
        points.append(point)
        if cell_path is not None:
            tmp = cell_path.with_suffix(".tmp")
            with open(tmp, "w") as f:
                json.dump({"privacy": point.privacy, "utility": point.utility,
                           "config_id": point.config_id, "seed": point.seed,
                           "lambda": point.lam, "sigma": point.sigma,
                           "kind": point.kind}, f, indent=2, sort_keys=True)
            tmp.replace(cell_path)
    return points, errors


def write_tradeoff_csv(points, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["config_id", "seed", "lambda", "sigma", "kind",
                         "privacy", "utility"])
        for p in points:
            writer.writerow([p.config_id, p.seed,
                             "" if p.lam is None else repr(float(p.lam)),
                             "" if p.sigma is None else repr(float(p.sigma)),
                             p.kind, repr(float(p.privacy)), repr(float(p.utility))])


def read_tradeoff_csv(path) -> list:
    points = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            points.append(TradeoffPoint(
                privacy=float(rec["privacy"]), utility=float(rec["utility"]),
                config_id=rec.get("config_id", ""), seed=int(rec.get("seed", 0) or 0),
                lam=float(rec["lambda"]) if rec.get("lambda") else None,
                sigma=float(rec["sigma"]) if rec.get("sigma") else None,
                kind=rec.get("kind", "")))
    return points


# ---------------------------------------------------------------------------
# Pareto front and normalized hypervolume

def _pu(point) -> tuple:
    if hasattr(point, "privacy"):
        return float(point.privacy), float(point.utility)
    return float(point[0]), float(point[1])


def _dominates(q, p) -> bool:
    """q dominates p under (privacy down, utility up); ties do not dominate."""
    qp, qu = q
    pp, pu = p
    return (qp < pp and qu >= pu) or (qp <= pp and qu > pu)


def pareto_front(points) -> list:
    """The non-dominated subset, ties kept, input order preserved."""
    if not list(points):
        raise ValueError("pareto_front needs at least one point")
    pus = [_pu(p) for p in points]
    return [p for i, p in enumerate(points)
            if not any(_dominates(pus[j], pus[i])
                       for j in range(len(points)) if j != i)]


def nhv(points, reference=NHV_REFERENCE) -> float:
    """Normalized hypervolume: area of the union of rectangles
    [privacy_i, ref_privacy] x [ref_utility, utility_i].

    With the default reference (1, 0) and points in the unit square this
    already lies in [0, 1]. Computed by an ascending-privacy sweep that adds
    each point's un-covered utility slab.
    """
    ref_p, ref_u = float(reference[0]), float(reference[1])
    pus = []
    for p in points:
        pp, pu = _pu(p)
        if not (0.0 <= pp <= 1.0 and 0.0 <= pu <= 1.0):
            raise ValueError(f"point ({pp}, {pu}) outside the unit square")
        pus.append((pp, pu))
    pus.sort(key=lambda t: (t[0], -t[1]))
    area = 0.0
    covered_u = ref_u
    for pp, pu in pus:
        if pp >= ref_p or pu <= covered_u:
            continue
        area += (ref_p - pp) * (pu - covered_u)
        covered_u = pu
    return area


def pareto_report(points, reference=NHV_REFERENCE) -> ParetoReport:
    front = pareto_front(points)
    return ParetoReport(points=tuple(points), front=tuple(front),
                        nhv=nhv(points, reference), reference=tuple(reference))


# ---------------------------------------------------------------------------
# Critical-point analysis (premise: task saliency is localized)

def critical_points(net: BackboneNet, cloud, top_k: int | None = None) -> CriticalSet:
    """Points whose per-point features win the max pool in >= 1 dimension.

    Removing every other point leaves the pooled feature — hence the logits —
    unchanged. Ranked by the number of feature dimensions won; the pigeonhole
    bound |critical set| <= feature_width holds by construction.
    """
    from .geometry import as_tensor
    t = as_tensor(cloud, next(net.parameters()).dtype).unsqueeze(0)
    with torch.no_grad():
        feats = net.point_features(t).squeeze(0).numpy()   # (n, F)
    winners = feats.argmax(axis=0)                         # first index on ties
    counts = np.bincount(winners, minlength=feats.shape[0])
    idx = np.flatnonzero(counts > 0)
    order = idx[np.lexsort((idx, -counts[idx]))]           # by count desc, then index
    if top_k is not None:
        order = order[:top_k]
    return CriticalSet(indices=order, win_counts=counts[order])


def critical_miou(set_a: CriticalSet, set_b: CriticalSet) -> float:
    inter = np.intersect1d(set_a.indices, set_b.indices).size
    union = np.union1d(set_a.indices, set_b.indices).size
    return inter / union if union else 1.0


def dataset_critical_miou(net_a: BackboneNet, net_b: BackboneNet,
                          dataset: Dataset, top_k: int = 100) -> float:
    """Mean mIoU of the two nets' top-k critical sets over all clouds."""
    vals = []
    for sample in dataset.samples:
        ca = critical_points(net_a, sample.cloud, top_k=top_k)
        cb = critical_points(net_b, sample.cloud, top_k=top_k)
        vals.append(critical_miou(ca, cb))
    return float(np.mean(vals))


def premise_report(train_set: Dataset, test_set: Dataset, stream: RandomStream,
                   steps: int = 1000, top_k: int = 100,
                   feature_width: int = 256) -> dict:
    """Train task and sensitive backbones on raw clouds and measure how much
    their critical sets overlap on the test split."""
    clouds, y_t, y_s = _tensors(train_set)
    net_task = build_backbone(train_set.d, feature_width,
                              len(train_set.task_classes),
                              stream.substream("user-init"))
    net_sens = build_backbone(train_set.d, feature_width,
                              len(train_set.sensitive_classes),
                              stream.substream("attacker-init"))
    _train_classifier(net_task, clouds, y_t, steps, stream.substream("data", 1))
    _train_classifier(net_sens, clouds, y_s, steps, stream.substream("data", 2))
    clouds_te, y_t_te, y_s_te = _tensors(test_set)
    return {
        "top_k": top_k,
        "miou": dataset_critical_miou(net_task, net_sens, test_set, top_k=top_k),
        "task_test_acc": accuracy(net_task, clouds_te, y_t_te),
        "sensitive_test_acc": accuracy(net_sens, clouds_te, y_s_te),
    }


def plot_tradeoff(points, path, reference=NHV_REFERENCE) -> None:
    """Static scatter of all points with the Pareto front polyline."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    front = sorted((_pu(p) for p in pareto_front(points)), key=lambda t: t[0])
    xs, ys = zip(*[_pu(p) for p in points])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(xs, ys, s=18, alpha=0.7, label="runs")
    ax.plot([p for p, _ in front], [u for _, u in front],
            "o-", color="tab:red", label="pareto front")
    ax.set_xlabel("privacy (attacker accuracy, lower better)")
    ax.set_ylabel("utility (user accuracy, higher better)")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
