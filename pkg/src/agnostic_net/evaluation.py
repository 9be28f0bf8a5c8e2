"""Measurements: accuracy, cross-domain transfer of two independent CNNs,
the agnosticism probe, the alpha sweep and feature-response activation maps.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from .dann import (Architecture, Network, TrainConfig, accuracy_from_logits, evaluate, make_network, sgd_update,
                   train, train_supervised)
from .data import Dataset, Split, crop_images, eval_images
from .tensor import Tensor


def accuracy(net: Network, split: Split, head: str = "target", crop_size: int | None = None) -> float:
    """Eval-mode accuracy of one head on a split (centre crop, dropout off).

    The target head is scored against target labels, the protected head
    against protected labels.  Ties in the logits resolve to the lowest class.
    """
    if len(split) == 0:
        raise ValueError("accuracy of an empty split is undefined")
    crop = crop_size or net.input_shape[-1]
    labels = split.target_labels if head == "target" else split.protected_labels
    return accuracy_from_logits(net.predict(eval_images(split, crop), head), labels)


# ----------------------------------------------------------- cross-domain


@dataclass
class CrossDomainTable:
    target_model_on_target: float
    target_model_on_context: float
    context_model_on_target: float
    context_model_on_context: float

    def to_csv(self) -> str:
        return ("model,target_test,context_test\n"
                f"target_model,{self.target_model_on_target!r},{self.target_model_on_context!r}\n"
                f"context_model,{self.context_model_on_target!r},{self.context_model_on_context!r}\n")


def cross_domain_eval(dataset: Dataset, cfg: TrainConfig, arch: Architecture | str | None = None,
                      ) -> CrossDomainTable:
    """Train two unrelated plain CNNs (target concept / contextual concept) and
    score each on both hold-out sets.  Class k of one concept is read as class k
    of the other, e.g. disc <-> stripes."""
    target_net = make_network(dataset, arch, cfg.seed, protected=False)
    train_supervised(target_net, dataset, cfg, source="target")
    context_net = make_network(dataset, arch, cfg.seed + 1, protected=False)
    train_supervised(context_net, dataset, cfg, source="context")

    iid, ctx = dataset["target_test_iid"], dataset["context_test"]
    crop = dataset.crop_size

    def score(net, split, labels):
        return accuracy_from_logits(net.predict(eval_images(split, crop)), labels)

    return CrossDomainTable(
        score(target_net, iid, iid.target_labels),
        score(target_net, ctx, ctx.protected_labels),
        score(context_net, iid, iid.target_labels),
        score(context_net, ctx, ctx.protected_labels),
    )


# ------------------------------------------------------------------ probe


@dataclass
class ProbeConfig:
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    seed: int = 12345
    standardize: bool = True


def representations(net: Network, split: Split, crop_size: int, chunk: int = 256) -> np.ndarray:
    images = eval_images(split, crop_size)
    return np.concatenate([net.represent(Tensor(images[i:i + chunk])).data
                           for i in range(0, len(images), chunk)])


def train_probe(z_train: np.ndarray, y_train: np.ndarray, z_test: np.ndarray, y_test: np.ndarray,
                head: Sequence[L.LayerSpec], cfg: ProbeConfig | None = None) -> float:
    """Fit a fresh classifier on fixed representations; return held-out accuracy."""
    cfg = cfg or ProbeConfig()
    z_train = np.asarray(z_train, dtype=np.float64).reshape(len(z_train), -1)
    z_test = np.asarray(z_test, dtype=np.float64).reshape(len(z_test), -1)
    if cfg.standardize:
        mu, sd = z_train.mean(axis=0), z_train.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        z_train, z_test = (z_train - mu) / sd, (z_test - mu) / sd
    head = [s for s in head if s.kind != "grl"]
    rng = np.random.default_rng([cfg.seed, 0])
    params = L.init_params(head, (z_train.shape[1],), rng, "probe")
    drop_rng = np.random.default_rng([cfg.seed, 1])
    order_rng = np.random.default_rng([cfg.seed, 2])
    y_train = np.asarray(y_train, dtype=np.int64)
    for _ in range(cfg.epochs):
        perm = order_rng.permutation(len(z_train))
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            params.zero_grad()
            logits = L.run_stack(head, params, "probe", Tensor(z_train[idx]), True, drop_rng)
            L.softmax_cross_entropy(logits, y_train[idx]).backward()
            sgd_update(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    logits = L.run_stack(head, params, "probe", Tensor(z_test))
    return accuracy_from_logits(logits.data, y_test)


def probe_agnosticism(net: Network, dataset: Dataset, probe_cfg: ProbeConfig | None = None) -> float:
    """Held-out accuracy of a fresh protected-concept classifier on frozen features.

    The probe has the protected head's architecture (without the reversal
    layer), is trained on representations of ``context_train`` and scored on
    ``context_test``.  Chance is 0.5 on the balanced splits; staying near it
    is the operational certificate that the representation is agnostic.
    """
    crop = dataset.crop_size
    tr, te = dataset["context_train"], dataset["context_test"]
    head = net.arch.probe_head() or net.arch.target_head
    return train_probe(representations(net, tr, crop), tr.protected_labels,
                       representations(net, te, crop), te.protected_labels, head, probe_cfg)


# ------------------------------------------------------------------ sweep

SWEEP_COLUMNS = ("alpha", "repeat_seed", "acc_target_test", "acc_target_swapped", "acc_context_test", "probe_acc")
METRICS = SWEEP_COLUMNS[2:]


@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)

    def alphas(self) -> list[float]:
        seen = []
        for r in self.rows:
            if r["alpha"] not in seen:
                seen.append(r["alpha"])
        return seen

    def summary(self) -> list[dict]:
        """Per-alpha mean and population standard deviation of each metric."""
        out = []
        for a in self.alphas():
            group = [r for r in self.rows if r["alpha"] == a]
            row = {"alpha": a, "repeats": len(group)}
            for m in METRICS:
                vals = np.array([r[m] for r in group], dtype=np.float64)
                row[f"{m}_mean"] = float(vals.mean())
                row[f"{m}_std"] = float(vals.std())
            out.append(row)
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([repr(float(r["alpha"])), int(r["repeat_seed"])] + [repr(float(r[m])) for m in METRICS])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write("# mean and std over repeats; std is the population form (ddof=0)\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = ["alpha", "repeats"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
        w.writerow(cols)
        for r in self.summary():
            w.writerow([repr(float(r["alpha"])), r["repeats"]] + [repr(r[c]) for c in cols[2:]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> SweepResult:
        with open(path, newline="") as fh:
            rows = [{k: (int(v) if k == "repeat_seed" else float(v)) for k, v in r.items()}
                    for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
        return cls(rows)


def run_one(dataset: Dataset, cfg: TrainConfig, arch, probe_cfg: ProbeConfig | None = None) -> dict:
    """Train one DANN and collect the sweep metrics."""
    net = make_network(dataset, arch, cfg.seed)
    train(net, dataset, cfg)
    acc = evaluate(net, dataset)
    return {
        "alpha": cfg.alpha_max,
        "repeat_seed": cfg.seed,
        "acc_target_test": acc["acc_target_test"],
        "acc_target_swapped": acc["acc_target_swapped"],
        "acc_context_test": acc["acc_context_test"],
        "probe_acc": probe_agnosticism(net, dataset, probe_cfg),
    }


def _run_job(job):
    return run_one(*job)


def sweep_alpha(dataset: Dataset, cfg: TrainConfig, alphas: Sequence[float], repeats: int,
                arch: Architecture | str | None = None, probe_cfg: ProbeConfig | None = None,
                jobs: int = 1, seeds: Sequence[int] | None = None) -> SweepResult:
    """Grid over ``alpha_max``; repeat r uses seed ``cfg.seed + r`` unless ``seeds`` is given.

    Rows come back in alpha-then-seed order whatever the worker count.
    """
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha {a} outside [0, 1]")
    seeds = list(seeds) if seeds is not None else [cfg.seed + r for r in range(repeats)]
    work = []
    for a in alphas:
        for s in seeds:
            run_cfg = TrainConfig.from_dict({**asdict(cfg), "alpha_max": float(a), "seed": int(s)})
            work.append((dataset, run_cfg, arch, probe_cfg))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_job, work))
    else:
        rows = [_run_job(w) for w in work]
    return SweepResult(rows)


# --------------------------------------------------------- activation maps


@dataclass
class ActivationMap:
    values: np.ndarray  # H x W, in [0, 1]

    @property
    def shape(self):
        return self.values.shape

    def in_mask_mass(self, mask: np.ndarray, top_fraction: float = 0.1) -> float:
        return in_mask_mass(self.values, mask, top_fraction)


def feature_response_map(features: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Channelwise max of a C x h x w response, nearest-neighbour upsampled and
    normalized to a maximum of 1 (an all-zero response stays zero)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ValueError(f"expected a C x h x w feature map, got shape {features.shape}")
    reduced = np.maximum(features.max(axis=0), 0.0)
    h, w = reduced.shape
    rows = (np.arange(out_shape[0]) * h) // out_shape[0]
    cols = (np.arange(out_shape[1]) * w) // out_shape[1]
    up = reduced[rows][:, cols]
    peak = up.max()
    return up / peak if peak > 0 else up


def activation_map(net: Network, image: np.ndarray) -> ActivationMap:
    """Strongest response of the last feature-extractor layer, at input resolution.

    ``image`` is C x H x W at the network's input size (already centre-cropped).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    feats = net.features(Tensor(image[None])).data[0]
    return ActivationMap(feature_response_map(feats, image.shape[-2:]))


def activation_maps(net: Network, split: Split, crop_size: int) -> tuple[list[ActivationMap], np.ndarray]:
    """Maps for every image of a split, with the matching centre-cropped masks."""
    images, masks = crop_images(split.images, split.masks, crop_size)
    feats = []
    for start in range(0, len(images), 256):
        feats.append(net.features(Tensor(images[start:start + 256, None])).data)
    feats = np.concatenate(feats) if feats else np.zeros((0,))
    maps = [ActivationMap(feature_response_map(f, images.shape[-2:])) for f in feats]
    return maps, masks


def in_mask_mass(values: np.ndarray, mask: np.ndarray, top_fraction: float = 0.1) -> float:
    """Share of the most activated pixels that fall inside ``mask``.

    The top set is every pixel at or above the value of the k-th largest
    pixel, k = ceil(top_fraction * pixels), so ties are never split
    arbitrarily.  An all-zero map has no informative pixels and scores 0.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if values.shape != mask.shape:
        raise ValueError("map and mask shapes differ")
    if not np.any(values > 0):
        return 0.0
    k = max(1, int(np.ceil(top_fraction * values.size)))
    threshold = np.partition(values, values.size - k)[values.size - k]
    top = values >= threshold
    return float(mask[top].sum() / top.sum())


def compare_maps(map_a, map_b) -> float:
    """Pearson correlation over pixels; 0 when either map is constant."""
    a = np.asarray(getattr(map_a, "values", map_a), dtype=np.float64).reshape(-1)
    b = np.asarray(getattr(map_b, "values", map_b), dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


def least_correlated(maps_a: Sequence, maps_b: Sequence, k: int | None = None) -> list[tuple[int, float]]:
    """Indices ordered by ascending correlation between paired maps (ties by index)."""
    if len(maps_a) != len(maps_b):
        raise ValueError("need paired map lists")
    scored = [(i, compare_maps(a, b)) for i, (a, b) in enumerate(zip(maps_a, maps_b))]
    scored.sort(key=lambda t: (t[1], t[0]))
    return scored if k is None else scored[:k]
