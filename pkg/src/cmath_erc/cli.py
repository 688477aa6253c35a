"""Command-line entry point: ``cmath-erc <subcommand> [flags]``.

Settings are resolved as built-in defaults < ``--preset`` < ``--config`` JSON <
explicit flags. Exit status: 0 success, 1 validation or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataFormatError, SynthConfig, generate_synthetic, load_dataset, synth_preset, write_dataset
from .model import TrainConfig

TRAIN_PRESETS = {
    "iemocap-like": {"lr": 3.0e-3, "batch_size": 16, "gamma1": 1.0, "gamma2": 1.8, "d": 500},
    "meld-like": {"lr": 2.0e-4, "batch_size": 4, "gamma1": 1.0, "gamma2": 1.2, "d": 400},
}
PATH_KEYS = ("train", "val", "test", "data", "out", "checkpoint", "figures", "history")
EXTRA_KEYS = ("preset", "variants", "seeds", "head", "n", "samples")
DEFAULT_VARIANTS = ["full", "w/o CMA-T", "Text", "Audio", "Visual"]

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_SYNTH_FIELDS = {f.name for f in dataclasses.fields(SynthConfig)}
CONFIG_KEYS = _TRAIN_FIELDS | _SYNTH_FIELDS | set(PATH_KEYS) | set(EXTRA_KEYS)


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- argument parsing ---------------------------------------------------------------
def _defaults(cls) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}


def build_parser() -> argparse.ArgumentParser:
    td, sd = _defaults(TrainConfig), _defaults(SynthConfig)
    parser = _Parser(prog="cmath-erc", description="Multimodal emotion recognition in conversation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        p.add_argument("--config", help="strict JSON file of settings (flags override it)")
        if seed:
            p.add_argument("--seed", type=int, help=f"random seed (default {td['seed']})")

    def model_flags(p):
        p.add_argument("--preset", choices=sorted(TRAIN_PRESETS), help="bundled hyperparameters per corpus")
        p.add_argument("--modalities", help=f"modality subset such as 'ta' (default {td['modalities']!r})")
        p.add_argument("--head", choices=["t", "a", "v", "x"], help=f"prediction head (default {td['eval_head']!r})")
        p.add_argument("--epochs", type=int, help=f"training epochs (default {td['epochs']})")
        p.add_argument("--lr", type=float, help=f"learning rate (default {td['lr']})")
        p.add_argument("--batch", type=int, help=f"conversations per batch (default {td['batch_size']})")
        p.add_argument("--gamma1", type=float, help=f"low-level distillation weight (default {td['gamma1']})")
        p.add_argument("--gamma2", type=float, help=f"high-level distillation weight (default {td['gamma2']})")
        p.add_argument("--d", type=int, help=f"shared hidden width (default {td['d']})")
        p.add_argument("--figures", help="directory for rendered figures (default: next to --out)")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--preset", choices=["iemocap-like", "meld-like"], help="corpus-shaped dims, classes, speakers")
    p.add_argument("--out", help="output JSONL path (required)")
    p.add_argument("--split", help=f"split name, also salts utterance draws (default {sd['split']!r})")
    p.add_argument("--num-conversations", type=int, dest="num_conversations",
                   help=f"number of conversations (default {sd['num_conversations']})")
    p.add_argument("--cross-modal-only", type=float, dest="cross_modal_only",
                   help=f"fraction of utterances labelled only across modalities (default {sd['cross_modal_only']})")
    p.add_argument("--noise", type=float, help=f"feature noise std (default {sd['noise']})")

    p = sub.add_parser("train", help="train a model; writes a checkpoint and history.json")
    common(p)
    model_flags(p)
    p.add_argument("--train", help="training JSONL (required)")
    p.add_argument("--val", help="validation JSONL for model selection")
    p.add_argument("--out", help="checkpoint path (required)")
    p.add_argument("--history", help="history JSON path (default: history.json next to --out)")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(p, seed=False)
    p.add_argument("--checkpoint", help="checkpoint file (required)")
    p.add_argument("--data", "--test", dest="data", help="dataset JSONL (required)")
    p.add_argument("--head", choices=["t", "a", "v", "x"], help="prediction head (default: the checkpoint's)")
    p.add_argument("--out", help="metrics JSON path (default: stdout only)")
    p.add_argument("--figures", help="directory for the confusion-matrix figure (default: next to --out)")

    p = sub.add_parser("ablate", help="train and score ablation variants over several seeds")
    common(p)
    model_flags(p)
    p.add_argument("--train", help="training JSONL (required)")
    p.add_argument("--val", help="validation JSONL")
    p.add_argument("--test", help="test JSONL (required)")
    p.add_argument("--variant", action="append", dest="variants",
                   help=f"variant name or subset string, repeatable (default {', '.join(DEFAULT_VARIANTS)})")
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed alone)")
    p.add_argument("--out", help="output directory for ablation.json/.csv and the figure (required)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective on a toy model")
    common(p)
    p.add_argument("--d", type=int, help="toy width (default 8)")
    p.add_argument("--n", type=int, help="utterances in the toy conversation (default 3)")
    p.add_argument("--samples", type=int,
                   help="coordinates sampled per tensor, 0 for all (default 24)")

    p = sub.add_parser("export-embeddings", help="write fused utterance representations as JSON lines")
    common(p, seed=False)
    p.add_argument("--checkpoint", help="checkpoint file (required)")
    p.add_argument("--data", "--test", dest="data", help="dataset JSONL (required)")
    p.add_argument("--out", help="output JSONL (required)")

    p = sub.add_parser("inspect", help="print per-class counts and conversation-length statistics")
    common(p, seed=False)
    p.add_argument("--data", "--test", dest="data", help="dataset JSONL (required)")
    p.add_argument("--out", help="also write the statistics as JSON here")
    return parser


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    unknown = sorted(set(raw) - CONFIG_KEYS)
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")
    return raw


_FLAG_TO_KEY = {"batch": "batch_size", "head": "eval_head"}


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge preset, config file and explicit flags into one flat dict."""
    cfg = _load_config(getattr(args, "config", None))
    preset = getattr(args, "preset", None) or cfg.get("preset")
    merged: dict = {}
    if preset is not None and args.command != "synth":
        if preset not in TRAIN_PRESETS:
            raise ValidationError(f"unknown preset {preset!r}")
        merged.update(TRAIN_PRESETS[preset])
    merged.update(cfg)
    if "head" in merged:
        merged.setdefault("eval_head", merged.pop("head"))
    for key, val in vars(args).items():
        if key in ("command", "config", "verbose") or val is None:
            continue
        merged[_FLAG_TO_KEY.get(key, key)] = val
    if preset is not None:
        merged["preset"] = preset
    return merged


def _train_config(s: dict) -> TrainConfig:
    fields = {k: v for k, v in s.items() if k in _TRAIN_FIELDS}
    try:
        return TrainConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid training config: {exc}") from exc


def _require(s: dict, *keys: str) -> None:
    missing = [k for k in keys if not s.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _dataset(path: str, role: str):
    if not Path(path).is_file():
        raise ValidationError(f"{role} file not found: {path}")
    return load_dataset(path)


def _checkpoint(path: str):
    if not Path(path).is_file():
        raise ValidationError(f"checkpoint file not found: {path}")
    return load_checkpoint(path)


def _figures_dir(s: dict, out: Path) -> Path:
    return Path(s["figures"]) if s.get("figures") else (out if out.is_dir() else out.parent)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- subcommands --------------------------------------------------------------------
def cmd_synth(s: dict) -> int:
    _require(s, "out")
    fields = {k: v for k, v in s.items() if k in _SYNTH_FIELDS}
    try:
        cfg = synth_preset(s["preset"], **fields) if s.get("preset") else SynthConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid synthetic config: {exc}") from exc
    ds = generate_synthetic(cfg)
    Path(s["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, s["out"])
    print(f"wrote {len(ds)} conversations, {ds.num_utterances} utterances, dims {tuple(ds.modality_dims)}, "
          f"{ds.num_classes} classes -> {s['out']}")
    return 0


def cmd_train(s: dict) -> int:
    from .plotting import plot_history
    from .training import TrainingDiverged, train

    _require(s, "train", "out")
    cfg = _train_config(s)
    train_ds = _dataset(s["train"], "training")
    val_ds = _dataset(s["val"], "validation") if s.get("val") else None
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(s["history"]) if s.get("history") else out.parent / "history.json"

    try:
        ckpt, history = train(train_ds, val_ds, cfg)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out)
        _write_json(history_path, {"config": cfg.to_dict(), "history": exc.history, "diverged": str(exc)})
        print(f"training diverged: {exc}; last finite checkpoint -> {out}", file=sys.stderr)
        return 2
    save_checkpoint(ckpt, out)
    _write_json(history_path, {"config": cfg.to_dict(), "best_epoch": ckpt.epoch, "history": history})
    plot_history(history, _figures_dir(s, out) / "training_curves.png")
    print(f"best epoch {ckpt.epoch} -> {out}; history -> {history_path}")
    return 0


def cmd_eval(s: dict) -> int:
    from .plotting import plot_confusion
    from .training import evaluate

    _require(s, "checkpoint", "data")
    ckpt = _checkpoint(s["checkpoint"])
    ds = _dataset(s["data"], "dataset")
    head = s.get("eval_head")
    if head is not None and head != "x" and head not in ckpt.config.modalities:
        raise ValidationError(f"head {head!r} not available for modalities {ckpt.config.modalities!r}")
    m = evaluate(ckpt, ds, head)
    result = m.as_dict(ds.class_names)
    result["head"] = head or ckpt.config.eval_head
    print(json.dumps({k: result[k] for k in ("head", "accuracy", "weighted_f1")}))
    if s.get("out"):
        out = Path(s["out"])
        _write_json(out, result)
        rows = ["true\\pred," + ",".join(ds.class_names)]
        rows += [f"{name}," + ",".join(str(int(v)) for v in row) for name, row in zip(ds.class_names, m.confusion)]
        out.with_suffix(".confusion.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        plot_confusion(m.confusion, ds.class_names, _figures_dir(s, out) / "confusion.png")
    return 0


def cmd_ablate(s: dict) -> int:
    from .plotting import plot_ablation
    from .training import VARIANTS, ablate

    _require(s, "train", "test", "out")
    cfg = _train_config(s)
    variants = s.get("variants") or DEFAULT_VARIANTS
    for v in variants:
        if v not in VARIANTS and not (v and set(v) <= set("tav")):
            raise ValidationError(f"unknown variant {v!r}; known: {sorted(VARIANTS)} or a subset like 'ta'")
    seeds = s.get("seeds")
    if isinstance(seeds, str):
        try:
            seeds = [int(x) for x in seeds.split(",") if x.strip()]
        except ValueError as exc:
            raise ValidationError(f"--seeds must be comma-separated integers, got {s['seeds']!r}") from exc
    seeds = seeds or [cfg.seed]
    train_ds = _dataset(s["train"], "training")
    val_ds = _dataset(s["val"], "validation") if s.get("val") else None
    test_ds = _dataset(s["test"], "test")
    report = ablate(train_ds, val_ds, test_ds, cfg, variants, seeds)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "ablation.csv").write_text(report.to_csv(), encoding="utf-8")
    plot_ablation(report.summary(), _figures_dir(s, out / "x") / "ablation.png")
    sys.stdout.write(report.to_csv())
    return 0


def cmd_gradcheck(s: dict) -> int:
    from .diagnostics import model_gradcheck

    samples = s.get("samples")
    samples = 24 if samples is None else samples
    if samples < 0:
        raise ValidationError("--samples must be >= 0")
    try:
        report = model_gradcheck(d=s.get("d", 8), n=s.get("n", 3), seed=s.get("seed", 1),
                                 max_per_param=samples or None)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    print(report.summary())
    return 0 if report.passed else 2


def cmd_export(s: dict) -> int:
    from .training import export_embeddings

    _require(s, "checkpoint", "data", "out")
    ckpt = _checkpoint(s["checkpoint"])
    ds = _dataset(s["data"], "dataset")
    Path(s["out"]).parent.mkdir(parents=True, exist_ok=True)
    count = export_embeddings(ckpt, ds, s["out"])
    print(f"wrote {count} embeddings -> {s['out']}")
    return 0


def dataset_stats(ds) -> dict:
    lengths = np.array([len(c) for c in ds.conversations])
    counts = Counter()
    unlabeled = 0
    for c in ds.conversations:
        if c.labels is None:
            unlabeled += len(c)
        else:
            counts.update(int(y) for y in c.labels)
    return {
        "split": ds.split,
        "conversations": len(ds),
        "utterances": int(lengths.sum()),
        "unlabeled_utterances": unlabeled,
        "modality_dims": list(ds.modality_dims),
        "num_speakers": ds.num_speakers,
        "class_counts": {name: counts.get(i, 0) for i, name in enumerate(ds.class_names)},
        "length": {"min": int(lengths.min()), "max": int(lengths.max()), "mean": float(lengths.mean()),
                   "median": float(np.median(lengths))},
    }


def cmd_inspect(s: dict) -> int:
    _require(s, "data")
    stats = dataset_stats(_dataset(s["data"], "dataset"))
    print(f"split {stats['split']}: {stats['conversations']} conversations, {stats['utterances']} utterances, "
          f"dims {tuple(stats['modality_dims'])}, {stats['num_speakers']} speakers")
    print("class,count")
    for name, n in stats["class_counts"].items():
        print(f"{name},{n}")
    ln = stats["length"]
    print(f"length min {ln['min']} max {ln['max']} mean {ln['mean']:.2f} median {ln['median']:.1f}")
    if s.get("out"):
        _write_json(Path(s["out"]), stats)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "export-embeddings": cmd_export,
    "inspect": cmd_inspect,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, usage errors exit 1
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("cmath-erc: error: a subcommand is required", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        settings = resolve_settings(args)
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        parser._subparsers._group_actions[0].choices[args.command].print_usage(sys.stderr)
        print(f"cmath-erc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, DataFormatError, CheckpointError, KeyError, ValueError) as exc:
        print(f"cmath-erc {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"cmath-erc {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
