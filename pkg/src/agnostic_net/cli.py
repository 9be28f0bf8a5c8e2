"""Command-line entry point: ``agnostic-net <command> [flags]``.

Every command writes its outputs plus ``run_manifest.json`` under ``--out``.
Passing ``--manifest FILE`` replays a saved run with the exact resolved
settings; ``--out`` must be given again and only ``--force`` may be added.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__, checkpoint
from .dann import DEFAULT_ARCHITECTURE, TrainConfig, make_network, train
from .data import DatasetSpec, generate, load_dataset, save_dataset
from .evaluation import (ProbeConfig, activation_maps, in_mask_mass, least_correlated, probe_agnosticism,
                         sweep_alpha)
from .pgm import write_pgm
from .report import render

MANIFEST_NAME = "run_manifest.json"
SEED_ENV = "AGNOSTIC_NET_SEED"
PRESETS = ("desk", "experiment1", "experiment2")


class CommandError(Exception):
    """A user-facing failure; reported on stderr with a nonzero exit code."""


def _env_seed(fallback: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise CommandError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise CommandError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise CommandError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, args: dict, **resolved) -> None:
    manifest = {"tool": "agnostic-net", "version": __version__, "command": command, "args": args, **resolved}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_arch(path: str | None) -> tuple[str, str]:
    """Architecture text and its sha256 (the built-in default when no file is given)."""
    if path is None:
        text = DEFAULT_ARCHITECTURE
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise CommandError(f"cannot read architecture file: {exc}") from None
    return text, hashlib.sha256(text.encode()).hexdigest()


def _load_data(path: str):
    root = Path(path)
    if not root.is_dir():
        raise CommandError(f"dataset directory {root} does not exist")
    return load_dataset(root)


def _train_config(ns) -> TrainConfig:
    factory = {"desk": TrainConfig.desk, "experiment1": TrainConfig.experiment1,
               "experiment2": TrainConfig.experiment2}[ns.preset]
    overrides = {}
    for flag, name in (("alpha_max", "alpha_max"), ("alpha_ramp", "alpha_ramp_epochs"), ("lr", "base_lr"),
                       ("lr_decay_every", "lr_decay_every"), ("lr_decay_factor", "lr_decay_factor"),
                       ("momentum", "momentum"), ("weight_decay", "weight_decay"),
                       ("batch_size", "batch_size"), ("epochs", "epochs"), ("head_updates", "head_updates"),
                       ("adversary_rows", "adversary_rows"), ("adversary_steps", "adversary_steps"),
                       ("adversary_lr_scale", "adversary_lr_scale")):
        value = getattr(ns, flag, None)
        if value is not None:
            overrides[name] = value
    if ns.no_augment:
        overrides["augment"] = False
    overrides["seed"] = ns.seed if ns.seed is not None else _env_seed(0)
    cfg = factory(**overrides)
    if ns.alpha_ramp is None:
        # ramp alpha over the first half of training unless told otherwise
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "alpha_ramp_epochs": cfg.epochs // 2})
    return cfg


def _probe_config(ns) -> ProbeConfig:
    return ProbeConfig(epochs=ns.probe_epochs, lr=ns.probe_lr, seed=ns.probe_seed)


# ---------------------------------------------------------------- commands


def cmd_gen_data(ns) -> dict:
    seed = ns.seed if ns.seed is not None else _env_seed(7)
    spec = DatasetSpec(n_target_per_class=ns.n_target, n_context_per_class=ns.n_context,
                       n_test_per_class=ns.n_test, rho=ns.rho, image_size=ns.size, crop_size=ns.crop,
                       seed=seed)
    out = _prepare_out(ns.out, ns.force)
    save_dataset(generate(spec), out)
    return {"dataset_spec": asdict(spec), "seed": seed}


def cmd_train(ns) -> dict:
    dataset = _load_data(ns.data)
    arch_text, arch_hash = _read_arch(ns.arch)
    cfg = _train_config(ns)
    out = _prepare_out(ns.out, ns.force)
    net = make_network(dataset, arch_text, cfg.seed, protected=cfg.alpha_max > 0 or not ns.no_protected)
    report = train(net, dataset, cfg)
    report.to_csv(out / "report.csv")
    checkpoint.save(net, out / "model.ckpt")
    return {"train_config": cfg.to_dict(), "arch_sha256": arch_hash, "seed": cfg.seed,
            "dataset_spec": asdict(dataset.spec) if dataset.spec else None}


def _parse_alphas(text: str) -> list[float]:
    try:
        alphas = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise CommandError(f"--alphas must be comma-separated numbers, got {text!r}") from None
    if not alphas:
        raise CommandError("--alphas is empty")
    return alphas


def cmd_sweep(ns) -> dict:
    dataset = _load_data(ns.data)
    arch_text, arch_hash = _read_arch(ns.arch)
    cfg = _train_config(ns)
    alphas = _parse_alphas(ns.alphas)
    if ns.repeats < 1:
        raise CommandError("--repeats must be >= 1")
    out = _prepare_out(ns.out, ns.force)
    probe_cfg = _probe_config(ns)
    result = sweep_alpha(dataset, cfg, alphas, ns.repeats, arch_text, probe_cfg, jobs=ns.jobs)
    result.to_csv(out / "sweep.csv")
    result.summary_csv(out / "sweep_summary.csv")
    return {"train_config": cfg.to_dict(), "alphas": alphas, "repeats": ns.repeats, "arch_sha256": arch_hash,
            "probe_config": asdict(probe_cfg), "seed": cfg.seed,
            "dataset_spec": asdict(dataset.spec) if dataset.spec else None}


def _load_model(path: str):
    try:
        return checkpoint.load(path)
    except OSError as exc:
        raise CommandError(f"cannot read model: {exc}") from None


def cmd_probe(ns) -> dict:
    net = _load_model(ns.model)
    dataset = _load_data(ns.data)
    out = _prepare_out(ns.out, ns.force)
    probe_cfg = _probe_config(ns)
    acc = probe_agnosticism(net, dataset, probe_cfg)
    with open(out / "probe.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "probe_acc"])
        w.writerow([ns.model, repr(acc)])
    return {"probe_config": asdict(probe_cfg)}


def cmd_actmap(ns) -> dict:
    net = _load_model(ns.model)
    dataset = _load_data(ns.data)
    if ns.split not in dataset.splits or not len(dataset[ns.split]):
        raise CommandError(f"split {ns.split!r} is empty or missing in {ns.data}")
    split = dataset[ns.split]
    out = _prepare_out(ns.out, ns.force)
    maps, masks = activation_maps(net, split, dataset.crop_size)
    (out / ns.split).mkdir(exist_ok=True)
    names = [f"{ns.split}/{i:05d}" for i in range(len(maps))]
    with open(out / "actmap.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "in_mask_mass"])
        for name, m, mask in zip(names, maps, masks):
            write_pgm(out / f"{name}.act.pgm", m.values)
            w.writerow([f"{name}.pgm", repr(in_mask_mass(m.values, mask)) if mask.any() else "nan"])
    if ns.compare:
        other, _ = activation_maps(_load_model(ns.compare), split, dataset.crop_size)
        with open(out / "least_correlated.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "filename", "pearson"])
            for rank, (i, r) in enumerate(least_correlated(maps, other, ns.top), 1):
                w.writerow([rank, f"{names[i]}.pgm", repr(r)])
    return {}


def cmd_report(ns) -> dict:
    out = _prepare_out(ns.out, ns.force)
    for path in ns.csv:
        if not Path(path).is_file():
            raise CommandError(f"no such CSV file: {path}")
        render(path, out)
    return {}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sweep": cmd_sweep, "probe": cmd_probe,
            "actmap": cmd_actmap, "report": cmd_report}


# ------------------------------------------------------------------ parser


def _add_common(p, manifest: bool = True):
    p.add_argument("--out", required=not manifest, help="output directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    if manifest:
        p.add_argument("--manifest", help="replay the settings recorded in a run_manifest.json")


def _add_training(p):
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--arch", help="architecture file (default: built-in network)")
    p.add_argument("--preset", choices=PRESETS, default="desk",
                   help="base hyperparameters before individual overrides (default: desk)")
    p.add_argument("--alpha-max", type=float)
    p.add_argument("--alpha-ramp", type=int, help="epochs to ramp alpha up (default: half the epochs)")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay-every", type=int, help="epochs between lr drops; 0 disables decay")
    p.add_argument("--lr-decay-factor", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--head-updates", choices=("full", "weighted"))
    p.add_argument("--adversary-rows", choices=("all", "context"))
    p.add_argument("--adversary-steps", type=int)
    p.add_argument("--adversary-lr-scale", type=float)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--seed", type=int, help=f"run seed (default: ${SEED_ENV} or 0)")


def _add_probe(p):
    p.add_argument("--probe-epochs", type=int, default=ProbeConfig.epochs)
    p.add_argument("--probe-lr", type=float, default=ProbeConfig.lr)
    p.add_argument("--probe-seed", type=int, default=ProbeConfig.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agnostic-net", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic confounded dataset")
    _add_common(p)
    p.add_argument("--n-target", type=int, default=500, help="target-concept training images per class")
    p.add_argument("--n-context", type=int, default=1000, help="context-concept training images per class")
    p.add_argument("--n-test", type=int, default=50, help="hold-out images per class and split")
    p.add_argument("--rho", type=float, default=1.0, help="shape/background correlation")
    p.add_argument("--size", type=int, default=40)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--seed", type=int, help=f"generator seed (default: ${SEED_ENV} or 7)")

    p = sub.add_parser("train", help="train one network and write report.csv and model.ckpt")
    _add_common(p)
    _add_training(p)
    p.add_argument("--no-protected", action="store_true",
                   help="drop the protected head when alpha is 0 (plain CNN)")

    p = sub.add_parser("sweep", help="grid over alpha with repeats; writes sweep.csv")
    _add_common(p)
    _add_training(p)
    _add_probe(p)
    p.add_argument("--alphas", default=",".join(f"{a / 10:g}" for a in range(11)))
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("probe", help="train a fresh protected-concept classifier on frozen features")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    _add_probe(p)

    p = sub.add_parser("actmap", help="write activation maps as .act.pgm files")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--split", default="target_test_iid")
    p.add_argument("--compare", help="second model; ranks images by least map correlation")
    p.add_argument("--top", type=int, default=10, help="rows in least_correlated.csv")

    p = sub.add_parser("report", help="render CSVs as text tables and SVG charts")
    _add_common(p)
    p.add_argument("csv", nargs="*", help="CSV files to render")
    return parser


_REPLAY_KEEP = ("out", "force", "manifest", "command")
_REQUIRED = {"gen-data": ("out",), "train": ("out", "data"), "sweep": ("out", "data"),
             "probe": ("out", "model", "data"), "actmap": ("out", "model", "data"), "report": ("out", "csv")}


def _replay(ns, parser) -> argparse.Namespace:
    try:
        manifest = json.loads(Path(ns.manifest).read_text())
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read manifest: {exc}") from None
    if manifest.get("command") != ns.command:
        raise CommandError(f"manifest records command {manifest.get('command')!r}, not {ns.command!r}")
    merged = dict(manifest.get("args", {}))
    for key in _REPLAY_KEEP:
        if getattr(ns, key, None) not in (None, False):
            merged[key] = getattr(ns, key)
    replayed = argparse.Namespace(**{**vars(ns), **merged})
    arch = getattr(replayed, "arch", None)
    if "arch_sha256" in manifest and arch is not None:
        if _read_arch(arch)[1] != manifest["arch_sha256"]:
            raise CommandError(f"architecture file {arch} no longer matches the manifest hash")
    return replayed


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        if getattr(ns, "manifest", None):
            ns = _replay(ns, parser)
        missing = [k for k in _REQUIRED[ns.command] if not getattr(ns, k, None)]
        if missing:
            parser.error(f"{ns.command}: missing required " + ", ".join("--" + m for m in missing))
        resolved = COMMANDS[ns.command](ns)
        # the output location is left out so identical runs give identical trees
        args = {k: v for k, v in vars(ns).items() if k not in ("out", "force", "manifest", "command")}
        args["seed"] = resolved.get("seed", args.get("seed"))
        _write_manifest(Path(ns.out), ns.command, args, **resolved)
    except CommandError as exc:
        print(f"agnostic-net: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"agnostic-net: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
