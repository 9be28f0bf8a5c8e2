"""Domain-adversarial network: shared feature extractor, target head and a
protected head behind a gradient reversal layer, trained towards the saddle
point of

    E = (1 - a) * mean(L_y) - a * (mean(L_p over target rows) + mean(L_p over context rows))

minimised over the extractor and target head, maximised over the protected
head.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from .data import Dataset, LabeledBatch, batches, eval_images
from .tensor import Tensor

HEAD_UPDATES = ("full", "weighted")
ADVERSARY_ROWS = ("all", "context")

DEFAULT_ARCHITECTURE = """\
[features]
conv 8 3
relu
maxpool
conv 16 3
relu
maxpool
conv 16 3
relu
maxpool

[target_head]
dense 64
relu
dropout 0.5
dense 64
relu
dropout 0.5
dense 2

[protected_head]
grl
dense 64
relu
dropout 0.5
dense 64
relu
dropout 0.5
dense 2
"""

_SECTIONS = ("features", "target_head", "protected_head")


@dataclass
class Architecture:
    features: list[L.LayerSpec]
    target_head: list[L.LayerSpec]
    protected_head: list[L.LayerSpec]

    def __post_init__(self):
        for spec in self.features + self.target_head:
            if spec.kind == "grl":
                raise ValueError("a gradient reversal layer may only open the protected head")
        if self.protected_head:
            grls = [i for i, s in enumerate(self.protected_head) if s.kind == "grl"]
            if grls != [0]:
                raise ValueError("the protected head must start with exactly one grl layer")

    @classmethod
    def parse(cls, text: str) -> Architecture:
        sections: dict[str, list[str]] = {name: [] for name in _SECTIONS}
        current = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                if current not in sections:
                    raise ValueError(f"line {lineno}: unknown section [{current}]")
                continue
            if current is None:
                raise ValueError(f"line {lineno}: layer outside a section")
            try:
                sections[current].append(L.LayerSpec.from_line(line))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        return cls(sections["features"], sections["target_head"], sections["protected_head"])

    def to_text(self) -> str:
        blocks = []
        for name in _SECTIONS:
            specs = getattr(self, name)
            blocks.append(f"[{name}]\n" + "".join(s.to_line() + "\n" for s in specs))
        return "\n".join(blocks)

    def without_protected(self) -> Architecture:
        return Architecture(list(self.features), list(self.target_head), [])

    def probe_head(self) -> list[L.LayerSpec]:
        """The protected head's stack without its reversal layer."""
        return [s for s in self.protected_head if s.kind != "grl"]


class Network:
    """Feature extractor plus target head and (optionally) protected head."""

    def __init__(self, arch: Architecture, input_shape: tuple[int, int, int], seed: int = 0,
                 params: L.ParamStore | None = None):
        self.arch = arch
        self.input_shape = tuple(input_shape)
        feat_shapes = L.infer_shapes(arch.features, self.input_shape)
        self.feature_shape = feat_shapes[-1] if feat_shapes else self.input_shape
        z_dim = int(np.prod(self.feature_shape))
        if params is None:
            rng = np.random.default_rng([seed, 0])
            params = L.init_params(arch.features, self.input_shape, rng, "features")
            L.init_params(arch.target_head, (z_dim,), rng, "target", params)
            L.init_params(arch.protected_head, (z_dim,), rng, "protected", params)
        self.params = params

    @property
    def representation_dim(self) -> int:
        return int(np.prod(self.feature_shape))

    @property
    def has_protected_head(self) -> bool:
        return bool(self.arch.protected_head)

    def features(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        return L.run_stack(self.arch.features, self.params, "features", x, train, rng)

    def represent(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        z = self.features(x, train, rng)
        return L.flatten(z) if z.ndim != 2 else z

    def target_logits(self, z: Tensor, train: bool = False, rng=None, masks=None) -> Tensor:
        return L.run_stack(self.arch.target_head, self.params, "target", z, train, rng, masks)

    def protected_logits(self, z: Tensor, train: bool = False, rng=None, masks=None) -> Tensor:
        return L.run_stack(self.arch.protected_head, self.params, "protected", z, train, rng, masks)

    def predict(self, images: np.ndarray, head: str = "target", chunk: int = 256) -> np.ndarray:
        """Eval-mode logits for an N x C x H x W array."""
        outs = []
        for start in range(0, len(images), chunk):
            z = self.represent(Tensor(images[start:start + chunk]))
            logits = self.target_logits(z) if head == "target" else self.protected_logits(z)
            outs.append(logits.data)
        return np.concatenate(outs) if outs else np.zeros((0, 0))

    def copy(self) -> Network:
        return Network(self.arch, self.input_shape, params=self.params.copy())


@dataclass
class TrainConfig:
    alpha_max: float = 0.0
    alpha_ramp_epochs: int = 0
    base_lr: float = 0.001
    lr_decay_every: int = 3
    lr_decay_factor: float = 10.0
    momentum: float = 0.5
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    head_updates: str = "weighted"
    adversary_rows: str = "all"
    adversary_steps: int = 0
    adversary_lr_scale: float = 1.0
    augment: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha_max <= 1.0:
            raise ValueError(f"alpha_max must lie in [0, 1], got {self.alpha_max}")
        if self.alpha_ramp_epochs < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs and ramp length must be >= 0, batch size >= 1")
        if self.head_updates not in HEAD_UPDATES:
            raise ValueError(f"head_updates must be one of {HEAD_UPDATES}")
        if self.adversary_rows not in ADVERSARY_ROWS:
            raise ValueError(f"adversary_rows must be one of {ADVERSARY_ROWS}")
        if self.adversary_steps < 0 or self.adversary_lr_scale <= 0:
            raise ValueError("adversary_steps must be >= 0 and adversary_lr_scale > 0")

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        """Settings that train the built-in network on the synthetic data in a few CPU minutes."""
        base = {"base_lr": 0.005, "lr_decay_every": 0, "epochs": 16, "alpha_ramp_epochs": 8,
                "head_updates": "full", "adversary_rows": "context", "adversary_steps": 8, "adversary_lr_scale": 4.0}
        return cls(**{**base, **overrides})

    @classmethod
    def experiment1(cls, **overrides) -> TrainConfig:
        return cls(**{"base_lr": 0.01, **overrides})

    @classmethod
    def experiment2(cls, **overrides) -> TrainConfig:
        return cls(**{"base_lr": 0.001, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def alpha_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if cfg.alpha_ramp_epochs == 0:
        return cfg.alpha_max
    return min(cfg.alpha_max, cfg.alpha_max * epoch / cfg.alpha_ramp_epochs)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if cfg.lr_decay_every <= 0:
        return cfg.base_lr
    return cfg.base_lr * cfg.lr_decay_factor ** (-(epoch // cfg.lr_decay_every))


def dann_objective(y_losses, p_losses_target, p_losses_context, alpha: float) -> float:
    """Weighted two-loss objective; an empty context sum contributes zero."""
    y = np.asarray(y_losses, dtype=np.float64)
    if y.size == 0:
        raise ValueError("the target loss needs at least one labelled example")
    pt = np.asarray(p_losses_target, dtype=np.float64)
    pc = np.asarray(p_losses_context, dtype=np.float64)
    protected = (pt.mean() if pt.size else 0.0) + (pc.mean() if pc.size else 0.0)
    return float((1.0 - alpha) * y.mean() - alpha * protected)


def batch_losses(net: Network, batch: LabeledBatch, alpha: float, head_updates: str = "full",
                 train: bool = True, rng_y=None, rng_p=None, masks_y=None, masks_p=None,
                 adversary_rows: str = "all"):
    """Forward one batch.  Returns (scalar to backpropagate, L_y, L_p).

    With ``head_updates="weighted"`` the scalar is (1-a) L_y + a L_p for every
    parameter.  With ``"full"`` each head descends its own loss at unit weight
    and the extractor receives (1-a) dL_y - a dL_p through gradient scaling at
    the head entries.  The reversal layer supplies the sign flip in both.
    """
    n = batch.n_target
    if n == 0 and (alpha < 1.0 or head_updates == "full"):
        raise ValueError("batch has no target-labelled examples; the target loss is undefined")
    z = net.represent(batch.images, train)
    y_in, p_in = z, z
    if head_updates == "full":
        y_in = L.grad_scale(z, 1.0 - alpha)
        p_in = L.grad_scale(z, alpha)
    loss_y = None
    if n:
        logits_y = net.target_logits(y_in[:n], train, rng_y, masks_y)
        loss_y = L.softmax_cross_entropy(logits_y, batch.target_labels)
    logits_p = net.protected_logits(p_in, train, rng_p, masks_p)
    labels_p = batch.protected_labels
    loss_p = None
    if n and adversary_rows == "all":
        loss_p = L.softmax_cross_entropy(logits_p[:n], labels_p[:n])
    if len(batch) > n:
        ctx = L.softmax_cross_entropy(logits_p[n:], labels_p[n:])
        loss_p = ctx if loss_p is None else loss_p + ctx
    if head_updates == "full":
        total = loss_p if loss_y is None else loss_y + loss_p
    elif loss_y is None:
        total = alpha * loss_p
    else:
        total = (1.0 - alpha) * loss_y + alpha * loss_p
    return total, loss_y, loss_p


def sgd_update(params: L.ParamStore, lr: float, momentum: float, weight_decay: float,
               names: Sequence[str] | None = None) -> None:
    """Heavy-ball step v <- mu v - lr (g + wd theta); theta <- theta + v."""
    for name in (params.params if names is None else names):
        p = params[name]
        if p.grad is None:
            continue
        v = params.momentum[name]
        v *= momentum
        v -= lr * (p.grad + weight_decay * p.data)
        p.data = p.data + v
        p.grad = None


def adversary_catch_up(net: Network, batch: LabeledBatch, cfg: TrainConfig, lr: float, rng_p=None) -> None:
    """Extra descent steps of the protected head alone on a frozen representation.

    The single simultaneous step lets the extractor fool a stale adversary
    by shuffling features around rather than discarding them; letting the
    head catch up first makes the reversed gradient point at information the
    head can actually use.
    """
    n = batch.n_target
    rows = slice(n, None) if cfg.adversary_rows == "context" else slice(None)
    labels = batch.protected_labels[rows]
    if len(labels) == 0:
        return
    z = net.represent(batch.images, True).detach()[rows]
    names = list(net.params.group("protected"))
    for _ in range(cfg.adversary_steps):
        net.params.zero_grad()
        L.softmax_cross_entropy(net.protected_logits(z, True, rng_p), labels).backward()
        sgd_update(net.params, lr * cfg.adversary_lr_scale, cfg.momentum, cfg.weight_decay, names)


def saddle_sgd_step(net: Network, batch: LabeledBatch, cfg: TrainConfig, epoch: int,
                    rng_y=None, rng_p=None) -> dict:
    alpha = alpha_at_epoch(epoch, cfg)
    lr = lr_at_epoch(epoch, cfg)
    if cfg.adversary_steps and alpha > 0 and net.has_protected_head:
        adversary_catch_up(net, batch, cfg, lr, rng_p)
    net.params.zero_grad()
    total, loss_y, loss_p = batch_losses(net, batch, alpha, cfg.head_updates, True, rng_y, rng_p,
                                         adversary_rows=cfg.adversary_rows)
    total.backward()
    sgd_update(net.params, lr, cfg.momentum, cfg.weight_decay)
    return {
        "loss_y": float("nan") if loss_y is None else loss_y.item(),
        "loss_p": float("nan") if loss_p is None else loss_p.item(),
        "alpha": alpha,
        "lr": lr,
    }


def accuracy_from_logits(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    # np.argmax returns the first (lowest) index among ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


REPORT_COLUMNS = ("epoch", "alpha", "lr", "loss_y", "loss_p", "acc_target_test", "acc_context_test", "seed")


@dataclass
class RunReport:
    rows: list[dict]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> RunReport:
        with open(path, newline="") as fh:
            rows = []
            for r in csv.DictReader(fh):
                rows.append({k: (int(v) if k in ("epoch", "seed") else float(v)) for k, v in r.items()})
        return cls(rows)

    @property
    def final(self) -> dict:
        return self.rows[-1]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _eval_losses(net: Network, dataset: Dataset, crop: int) -> tuple[float, float]:
    tgt, ctx = dataset["target_train"], dataset["context_train"]
    loss_y = loss_p = float("nan")
    if len(tgt):
        x = eval_images(tgt, crop)
        loss_y = float(L.cross_entropy_per_example(net.predict(x), tgt.target_labels).mean())
    if net.has_protected_head:
        parts = []
        for split in (tgt, ctx):
            if len(split):
                logits = net.predict(eval_images(split, crop), "protected")
                parts.append(L.cross_entropy_per_example(logits, split.protected_labels).mean())
        loss_p = float(sum(parts)) if parts else float("nan")
    return loss_y, loss_p


def evaluate(net: Network, dataset: Dataset) -> dict:
    """Eval-mode accuracies on the hold-out splits that are present."""
    crop = dataset.crop_size
    out = {}
    iid = dataset.splits.get("target_test_iid")
    if iid is not None and len(iid):
        out["acc_target_test"] = accuracy_from_logits(net.predict(eval_images(iid, crop)), iid.target_labels)
    swapped = dataset.splits.get("target_test_swapped")
    if swapped is not None and len(swapped):
        out["acc_target_swapped"] = accuracy_from_logits(net.predict(eval_images(swapped, crop)),
                                                         swapped.target_labels)
    ctx = dataset.splits.get("context_test")
    if net.has_protected_head and ctx is not None and len(ctx):
        out["acc_context_test"] = accuracy_from_logits(net.predict(eval_images(ctx, crop), "protected"),
                                                       ctx.protected_labels)
    return out


def _step_rngs(seed: int):
    return np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2])


def train(net: Network, dataset: Dataset, cfg: TrainConfig) -> RunReport:
    """Run ``cfg.epochs`` epochs of saddle-point SGD; row k is the state after k epochs."""
    rng_y, rng_p = _step_rngs(cfg.seed)
    rows = []

    def record(epoch: int, loss_y: float, loss_p: float, alpha: float, lr: float):
        acc = evaluate(net, dataset)
        rows.append({
            "epoch": epoch, "alpha": alpha, "lr": lr, "loss_y": loss_y, "loss_p": loss_p,
            "acc_target_test": acc.get("acc_target_test", float("nan")),
            "acc_context_test": acc.get("acc_context_test", float("nan")),
            "seed": cfg.seed,
        })

    record(0, *_eval_losses(net, dataset, dataset.crop_size), alpha_at_epoch(0, cfg), lr_at_epoch(0, cfg))
    for epoch in range(cfg.epochs):
        ly, lp = [], []
        for batch in batches(dataset, cfg.batch_size, cfg.seed, epoch, cfg.augment):
            stats = saddle_sgd_step(net, batch, cfg, epoch, rng_y, rng_p)
            ly.append(stats["loss_y"])
            lp.append(stats["loss_p"])
        record(epoch + 1, float(np.nanmean(ly)), float(np.nanmean(lp)),
               alpha_at_epoch(epoch, cfg), lr_at_epoch(epoch, cfg))
    return RunReport(rows)


def supervised_step(net: Network, images: Tensor, labels: np.ndarray, lr: float, cfg: TrainConfig,
                    rng=None, n_labelled: int | None = None) -> float:
    """One plain SGD step of the target head on the first ``n_labelled`` rows."""
    n = len(labels) if n_labelled is None else n_labelled
    net.params.zero_grad()
    z = net.represent(images, True)
    loss = L.softmax_cross_entropy(net.target_logits(z[:n], True, rng), labels[:n])
    loss.backward()
    sgd_update(net.params, lr, cfg.momentum, cfg.weight_decay)
    return loss.item()


def train_supervised(net: Network, dataset: Dataset, cfg: TrainConfig, source: str = "target") -> list[float]:
    """Plain CNN training of G_y o G_f with no protected head involved.

    ``source="target"`` fits target labels on the DANN batch stream (context
    rows pass through the extractor but carry no loss); ``source="context"``
    fits background labels on context_train alone.  Returns per-epoch losses.
    """
    rng_y, _ = _step_rngs(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        losses = []
        if source == "target":
            for batch in batches(dataset, cfg.batch_size, cfg.seed, epoch, cfg.augment):
                losses.append(supervised_step(net, batch.images, batch.target_labels, lr, cfg, rng_y,
                                              batch.n_target))
        elif source == "context":
            only = Dataset({"target_train": dataset["context_train"],
                            "context_train": dataset["context_train"].__class__.empty(dataset.image_size)},
                           dataset.spec, dataset.image_size, dataset.crop_size)
            for batch in batches(only, cfg.batch_size, cfg.seed, epoch, cfg.augment):
                losses.append(supervised_step(net, batch.images, batch.protected_labels, lr, cfg, rng_y))
        else:
            raise ValueError(f"unknown source {source!r}")
        history.append(float(np.mean(losses)))
    return history


def make_network(dataset: Dataset, arch: Architecture | str | None = None, seed: int = 0,
                 protected: bool = True) -> Network:
    if arch is None:
        arch = DEFAULT_ARCHITECTURE
    if isinstance(arch, str):
        arch = Architecture.parse(arch)
    if not protected:
        arch = arch.without_protected()
    return Network(arch, (1, dataset.crop_size, dataset.crop_size), seed)


__all__ = [
    "Architecture", "Network", "TrainConfig", "RunReport", "DEFAULT_ARCHITECTURE",
    "alpha_at_epoch", "lr_at_epoch", "dann_objective", "batch_losses", "saddle_sgd_step",
    "sgd_update", "train", "train_supervised", "evaluate", "accuracy_from_logits", "make_network",
]
