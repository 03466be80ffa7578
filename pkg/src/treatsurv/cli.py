"""Command-line interface.

Exit codes: 0 success, 1 gradient check failure, 2 config/usage error,
3 I/O error, 4 numerical abort, 5 shape mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

from .conditioning import TREATMENTS
from .data import SyntheticConfig, generate_synthetic, normalize_volume, read_dataset, read_volume, write_dataset
from .exceptions import ConfigError, FormatError, NumericalError, ShapeError, ValidationError
from .gradcheck import DEFAULT_TOL, run_suite
from .model import FUSION_MODES, SurvivalNetConfig, clamp_days
from .tensor import UnfoldedVolumes
from .training import TrainConfig, cross_validate, load_checkpoint, predict, run_ablation

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_SHAPE = 0, 1, 2, 3, 4, 5
CONFIG_SECTIONS = ("synthetic", "model", "train")


class DatasetIOError(Exception):
    """Wraps any failure while reading a dataset directory."""


def load_config(path) -> dict:
    """Effective ``{"synthetic", "model", "train"}`` config objects from an optional JSON file."""
    raw = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)} (expected {list(CONFIG_SECTIONS)})")
    synthetic = SyntheticConfig.from_dict(raw.get("synthetic", {})).validate()
    model = SurvivalNetConfig.from_dict(raw.get("model", {}))
    train_raw = dict(raw.get("train", {}))
    if "model" in train_raw:
        raise ConfigError("put model keys in the top-level 'model' section")
    train = TrainConfig.from_dict({**train_raw, "model": model}).validate()
    return {"synthetic": synthetic, "model": model, "train": train}


def effective_config(cfg: dict) -> dict:
    train = cfg["train"].to_dict()
    model = train.pop("model")
    return {"synthetic": cfg["synthetic"].to_dict(), "model": model, "train": train}


def _read_dataset(path):
    try:
        return read_dataset(path)
    except (OSError, FormatError, ValidationError, json.JSONDecodeError, KeyError) as exc:
        raise DatasetIOError(f"cannot read dataset {path}: {exc}") from exc


def _dump(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    samples = generate_synthetic(cfg["synthetic"])
    out = write_dataset(samples, args.out)
    _dump(out / "config.json", effective_config(cfg))
    counts = Counter(s.treatment.label for s in samples)
    print(f"subjects: {len(samples)}")
    print("treatment counts: " + " ".join(f"{t}={counts.get(t, 0)}" for t in TREATMENTS))
    return EXIT_OK


def _train_config(cfg: dict, samples, fusion: str | None) -> TrainConfig:
    train = cfg["train"]
    if fusion is not None:
        train = train.with_fusion(fusion)
    channels = samples[0].volume.shape[0]
    extent = samples[0].volume.shape[1]
    model = replace(train.model, in_channels=channels, input_extent=extent)
    return replace(train, model=model).validate()


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    samples = _read_dataset(args.data)
    train = _train_config(cfg, samples, args.fusion)
    cfg["train"] = train
    out = Path(args.out)
    report = cross_validate(samples, train, checkpoint_dir=out)
    payload = report.to_dict()
    payload["effective_config"] = effective_config(cfg)
    _dump(out / "report.json", payload)
    print(f"fusion: {train.fusion}")
    print(f"MAE (in days): {report.mean:.1f} ± {report.std:.1f}")
    return EXIT_OK


def _parse_seeds(text: str) -> list:
    try:
        seeds = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be a comma-separated list of ints, got {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds must list at least one seed")
    return seeds


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seeds = _parse_seeds(args.seeds)
    samples = _read_dataset(args.data)
    train = _train_config(cfg, samples, None)
    cfg["train"] = train
    report = run_ablation(samples, train, seeds=seeds)
    payload = report.to_dict()
    payload["effective_config"] = effective_config(cfg)
    out = Path(args.out)
    _dump(out / "ablation.json", payload)
    table = report.table()
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def _load_for_prediction(args):
    try:
        net, _ = load_checkpoint(args.checkpoint)
        volume = read_volume(args.volume)
    except (OSError, FormatError) as exc:
        raise DatasetIOError(str(exc)) from exc
    cfg = net.config
    if volume.shape[0] != cfg.in_channels or volume.shape[1:] != (cfg.input_extent,) * 3:
        raise ShapeError(f"volume shape {volume.shape} does not fit a model expecting "
                         f"{cfg.in_channels} channels of extent {cfg.input_extent}")
    k = cfg.kernel_size
    inputs = UnfoldedVolumes.from_volumes(normalize_volume(volume, str(args.volume))[None], k, k // 2)
    return net, inputs


def predict_days(net, inputs, treatment: str) -> float:
    return float(predict(net, inputs=inputs, treatments=[treatment])[0])


def cmd_predict(args) -> int:
    net, inputs = _load_for_prediction(args)
    raw = predict_days(net, inputs, args.treatment)
    clamped = float(clamp_days(raw))
    if args.json:
        print(json.dumps({"treatment": args.treatment, "raw_days": raw, "clamped_days": clamped,
                          "config": net.config.to_dict()}, sort_keys=True))
    else:
        print(f"treatment {args.treatment}: predicted survival {raw:.2f} days (clamped {clamped:.2f})")
    return EXIT_OK


def compare_rows(net, inputs) -> list:
    """Rows sorted by predicted days, longest first; ties keep GTR, STR, NA order."""
    rows = [{"treatment": t, "raw_days": predict_days(net, inputs, t)} for t in TREATMENTS]
    for r in rows:
        r["clamped_days"] = float(clamp_days(r["raw_days"]))
    rows.sort(key=lambda r: -r["raw_days"])
    conditioned = net.config.fusion != "none"
    for i, r in enumerate(rows):
        r["best"] = conditioned and i == 0
    return rows


def cmd_compare(args) -> int:
    net, inputs = _load_for_prediction(args)
    if net.config.fusion == "none":
        print("warning: checkpoint ignores treatment (fusion=none); predictions are identical",
              file=sys.stderr)
    rows = compare_rows(net, inputs)
    if args.json:
        print(json.dumps({"rows": rows, "config": net.config.to_dict()}, sort_keys=True))
        return EXIT_OK
    print(f"{'treatment':<10}{'days':>10}{'clamped':>10}")
    for r in rows:
        flag = "  <- best" if r["best"] else ""
        print(f"{r['treatment']:<10}{r['raw_days']:>10.2f}{r['clamped_days']:>10.2f}{flag}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_suite(seed=args.seed, tol=args.tol)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed at tol {args.tol:g}")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treatsurv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic phantom dataset")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="K-fold cross-validated training for one fusion mode")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--fusion", choices=FUSION_MODES)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="none / concat / adain comparison over seeds")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    for name, func, helptext in (("predict", cmd_predict, "predict survival for one volume"),
                                 ("compare", cmd_compare, "rank treatments for one volume")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--volume", type=Path, required=True)
        if name == "predict":
            p.add_argument("--treatment", choices=TREATMENTS, required=True)
        p.add_argument("--json", action="store_true", help="machine-readable output")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ShapeError as exc:
        print(f"shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (DatasetIOError, FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValidationError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
