"""Command-line entry point: synth, preprocess, train, evaluate, predict.

Every command accepts ``--config FILE.json`` and repeated ``--set key=value``
overrides; explicit flags win over both. The effective configuration is
written as ``effective_config.json`` next to the command's outputs.

Exit codes: 0 success, 2 invalid input/configuration, 3 runtime failure,
4 partial batch failure (some recordings could not be processed).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import secrets
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .audio_io import PIPELINE_RATE_HZ, WavError, load_wav, resample
from .dataset import (
    LABEL_NAMES,
    ManifestError,
    load_manifest,
    read_patch_cache,
    shuffle_labels,
    write_cache_index,
    write_patch_cache,
)
from .harness import (
    ALL,
    HarnessError,
    TrainConfig,
    patch_probabilities,
    median_probability,
    run_experiment,
    write_predictions,
)
from .metrics import evaluate, write_roc_csv
from .models import GENDERS, ConfigError, ModelConfig, load_model
from .nn.checkpoint import CheckpointError
from .sad import SadConfig, apply_sad
from .spectro import SpectroConfig, make_patches
from .synth import generate_corpus

log = logging.getLogger("coughscreen")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3
EXIT_PARTIAL = 4

CACHE_CONFIG = "cache_config.json"
SAD_CHOICES = {"rms": "rms", "flux": "spectral_flux", "off": None}
GENDER_CHOICES = {"baseline": "baseline", "based": "gender_based", "specific": "gender_specific"}


class UsageError(ValueError):
    """Bad configuration or inputs; maps to exit code 2."""


# --- configuration merging -----------------------------------------------------

DEFAULTS = {
    "synth": {"n_per_class": 50, "seed": None, "sample_rate": 44100, "k_folds": 5},
    "preprocess": {"sad": "rms", "sad_threshold": 0.1, "sad_frame_ms": 64.0, "scale": "log", "cmap": "magma",
                   "image_px": 256, "win": 1024, "hop": 128, "patch_s": 1.0, "overlap": 0.5, "db_floor": -80.0,
                   "sample_rate": PIPELINE_RATE_HZ, "workers": 1},
    "train": {"attention": False, "attention_mode": "scale", "gender": "baseline", "lr": 1e-3, "batch_size": 32,
              "max_epochs": 100, "patience": 10, "k_folds": 5, "seed": None, "shuffle_labels": False, "workers": 1},
    "evaluate": {"split": "auto", "target_sensitivity": 0.8},
    "predict": {"verbose": False, "gender": None, "workers": 1},
}


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if like is None:
        try:
            return json.loads(value)
        except json.JSONDecodeError:
            return value
    return value


def effective_config(command: str, args: argparse.Namespace) -> dict:
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in defaults:
            raise UsageError(f"unknown config key for {command}: {key!r}")
        try:
            cfg[key] = _coerce(value, defaults[key])
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from exc
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def write_effective_config(out_dir, command: str, cfg: dict, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "version": __version__, "config": cfg}
    if extra:
        payload.update(extra)
    path = out_dir / "effective_config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def _seed(cfg: dict) -> int:
    if cfg.get("seed") is None:
        cfg["seed"] = secrets.randbelow(2**31)
        print(f"no --seed given; using seed {cfg['seed']}")
    return int(cfg["seed"])


def spectro_config(cfg: dict) -> SpectroConfig:
    return SpectroConfig(win_len_samples=int(cfg["win"]), hop_samples=int(cfg["hop"]), freq_scale=cfg["scale"],
                         colormap=cfg["cmap"], image_px=int(cfg["image_px"]), patch_len_s=float(cfg["patch_s"]),
                         patch_overlap=float(cfg["overlap"]), db_floor=float(cfg["db_floor"]))


def sad_config(cfg: dict) -> SadConfig | None:
    if cfg["sad"] not in SAD_CHOICES:
        raise UsageError(f"--sad must be one of {sorted(SAD_CHOICES)}")
    method = SAD_CHOICES[cfg["sad"]]
    if method is None:
        return None
    return SadConfig(frame_len_ms=float(cfg["sad_frame_ms"]), threshold=float(cfg["sad_threshold"]), method=method)


def prepare_patches(path, pre_cfg: dict, source_id: str):
    """Audio file -> resampled -> (optional) SAD -> rendered patches."""
    clip = resample(load_wav(path), int(pre_cfg["sample_rate"]))
    sad = sad_config(pre_cfg)
    if sad is not None:
        clip = apply_sad(clip, sad)
    return make_patches(clip, spectro_config(pre_cfg), source_id)


# --- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = effective_config("synth", args)
    seed = _seed(cfg)
    manifest = generate_corpus(args.out_dir, int(cfg["n_per_class"]), seed, int(cfg["sample_rate"]),
                               int(cfg["k_folds"]))
    write_effective_config(args.out_dir, "synth", cfg)
    print(f"wrote {2 * int(cfg['n_per_class'])} recordings and {manifest}")
    return EXIT_OK


def _prepare_one(job):
    rid, path, pre_cfg = job
    try:
        return prepare_patches(path, pre_cfg, rid), None
    except (OSError, WavError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _preprocess_one(job):
    rid, path, pre_cfg, out_dir = job
    patches, err = _prepare_one((rid, path, pre_cfg))
    if err is not None:
        return rid, None, err
    return rid, write_patch_cache(out_dir, rid, patches), None


def cmd_preprocess(args) -> int:
    cfg = effective_config("preprocess", args)
    spectro_config(cfg)
    sad_config(cfg)
    records = load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(r.id, r.path, cfg, str(out_dir)) for r in records]
    workers = max(1, int(cfg["workers"]))
    if workers == 1:
        results = [_preprocess_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_preprocess_one, jobs))
    rows, failures, per_id = [], [], {}
    for rid, r_rows, err in results:
        if err is None:
            rows.extend(r_rows)
            per_id[rid] = len(r_rows)
        else:
            failures.append((rid, err))
    write_cache_index(out_dir, rows)
    (out_dir / CACHE_CONFIG).write_text(json.dumps(cfg, indent=2, sort_keys=True))
    write_effective_config(out_dir, "preprocess", cfg, {"manifest": str(args.manifest)})
    counts = {name: 0 for name in LABEL_NAMES}
    counts["unlabelled"] = 0
    for r in records:
        if r.id in per_id:
            key = "unlabelled" if r.label is None else LABEL_NAMES[r.label]
            counts[key] += per_id[r.id]
    print("patches per class: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    if failures:
        with open(out_dir / "failures.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("id", "error"))
            w.writerows(failures)
        print(f"{len(failures)} of {len(records)} recordings failed; see {out_dir / 'failures.csv'}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _load_cache_config(cache_dir) -> dict:
    path = Path(cache_dir) / CACHE_CONFIG
    if not path.is_file():
        raise UsageError(f"{cache_dir} is not a preprocessed cache (no {CACHE_CONFIG})")
    return json.loads(path.read_text())


def _load_patches(cache_dir, records):
    ids = [r.id for r in records]
    patches = read_patch_cache(cache_dir, ids)
    missing = [i for i in ids if i not in patches]
    if missing:
        raise UsageError(f"cache/manifest mismatch: {len(missing)} recording(s) missing from cache, e.g. {missing[:5]}")
    return patches


def cmd_train(args) -> int:
    cfg = effective_config("train", args)
    if cfg["gender"] not in GENDER_CHOICES:
        raise UsageError(f"--gender must be one of {sorted(GENDER_CHOICES)}")
    seed = _seed(cfg)
    model_config = ModelConfig(attention=bool(cfg["attention"]), attention_mode=cfg["attention_mode"],
                               gender_mode=GENDER_CHOICES[cfg["gender"]])
    train_config = TrainConfig(lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
                               max_epochs=int(cfg["max_epochs"]), patience=int(cfg["patience"]),
                               k_folds=int(cfg["k_folds"]), seed=seed)
    try:
        model_config.validate()
        train_config.validate()
    except (ConfigError, HarnessError) as exc:
        raise UsageError(str(exc)) from exc
    pre_cfg = _load_cache_config(args.cache)
    records = [r for r in load_manifest(args.manifest) if not r.is_test]
    unlabelled = [r.id for r in records if r.label is None]
    if unlabelled:
        raise UsageError(f"training records without labels: {unlabelled[:5]}")
    if cfg["shuffle_labels"]:
        records = shuffle_labels(records, np.random.default_rng(seed))
    patches = _load_patches(args.cache, records)
    run_dir = Path(args.run_dir)
    write_effective_config(run_dir, "train", cfg, {"cache": str(args.cache), "manifest": str(args.manifest)})
    _, metrics = run_experiment(run_dir, records, patches, model_config, train_config,
                                extra_config={"preprocess": pre_cfg}, workers=max(1, int(cfg["workers"])))
    mean = metrics["mean"]
    print("cross-validation mean: " + ", ".join(f"{k}={v:.4f}" if v is not None else f"{k}=n/a"
                                                for k, v in mean.items()))
    return EXIT_OK


def load_predictor(checkpoints):
    """One checkpoint -> model; ``*_female``/``*_male`` pair -> ``{gender: model}``."""
    loaded = [load_model(p) for p in checkpoints]
    groups = [cfg.get("group", ALL) for _, cfg in loaded]
    if len(loaded) == 1 and groups[0] == ALL:
        return loaded[0][0], loaded[0][1]
    by_group = {g: m for (m, _), g in zip(loaded, groups)}
    if set(by_group) != set(GENDERS) or len(loaded) != len(GENDERS):
        raise UsageError(f"expected one checkpoint, or one per gender {GENDERS}; got groups {groups}")
    return by_group, loaded[0][1]


def _predictor_needs_gender(predictor) -> bool:
    if isinstance(predictor, dict):
        return True
    return predictor.config.uses_gender_input


def _final_checkpoints(run_dir) -> list[Path]:
    final = Path(run_dir) / "final"
    paths = sorted(final.glob("checkpoint*.bin"))
    if not paths:
        raise UsageError(f"no checkpoints under {final}")
    return paths


def cmd_evaluate(args) -> int:
    cfg = effective_config("evaluate", args)
    predictor, _ = load_predictor(_final_checkpoints(args.run_dir))
    records = load_manifest(args.manifest)
    split = cfg["split"]
    if split == "auto":
        split = "test" if any(r.is_test for r in records) else "all"
    if split == "test":
        records = [r for r in records if r.is_test]
    elif split != "all":
        raise UsageError("--split must be test, all or auto")
    records = [r for r in records if r.label is not None]
    if not records:
        raise UsageError("no labelled records to evaluate")
    patches = _load_patches(args.cache, records)
    rows = [(r.id, median_probability(patch_probabilities(predictor, patches[r.id], r.gender)), r.label)
            for r in records]
    scores = np.array([s for _, s, _ in rows])
    labels = np.array([y for _, _, y in rows])
    out = Path(args.run_dir) / "eval"
    write_effective_config(out, "evaluate", cfg)
    m = evaluate(scores, labels, float(cfg["target_sensitivity"]))
    (out / "metrics.json").write_text(json.dumps({"split": split, **m.to_dict(), "n": len(rows)}, indent=2,
                                                 sort_keys=True))
    write_predictions(out / "predictions.csv", rows)
    write_roc_csv(out / "roc.csv", scores, labels)
    print(json.dumps(m.to_dict()))
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = effective_config("predict", args)
    predictor, ck_cfg = load_predictor(args.checkpoint)
    pre_cfg = ck_cfg.get("preprocess") or dict(DEFAULTS["preprocess"])
    if args.audio:
        items = [(Path(a).stem, a, cfg["gender"], None) for a in args.audio]
    else:
        records = load_manifest(args.manifest)
        items = [(r.id, r.path, r.gender, r.label) for r in records]
    needs_gender = _predictor_needs_gender(predictor)
    if needs_gender:
        lacking = [i for i, _, g, _ in items if g is None]
        if lacking:
            raise UsageError(f"checkpoint needs gender, missing for {lacking[:5]} (use a manifest gender column or --gender)")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    jobs = [(rid, path, pre_cfg) for rid, path, _, _ in items]
    workers = max(1, int(cfg["workers"]))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            prepared = list(pool.map(_prepare_one, jobs))
    else:
        prepared = [_prepare_one(j) for j in jobs]
    rows, patch_rows, failures = [], [], []
    for (rid, path, gender, label), (patches, err) in zip(items, prepared):
        if err is not None:
            failures.append((rid, err))
            continue
        probs = patch_probabilities(predictor, patches, gender if needs_gender else None)
        rows.append((rid, median_probability(probs), len(patches), label))
        if cfg["verbose"]:
            model = predictor[gender] if isinstance(predictor, dict) else predictor
            alphas = _attention_maps(model, patches, gender)
            for p, prob, a in zip(patches, probs, alphas):
                patch_rows.append((rid, p.start_ms, repr(float(prob)), "" if a is None else ";".join(f"{v:.6f}" for v in a)))
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "score", "patch_count", "label"))
        for rid, score, count, label in rows:
            w.writerow((rid, repr(float(score)), count, "" if label is None else label))
    if cfg["verbose"]:
        with open(out_path.with_name(out_path.stem + "_patches.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("id", "start_ms", "score", "attention"))
            w.writerows(patch_rows)
    write_effective_config(out_path.parent, "predict", cfg, {"checkpoints": [str(c) for c in args.checkpoint]})
    for rid, err in failures:
        print(f"failed: {rid}: {err}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


def _attention_maps(model, patches, gender):
    """Per-patch 2x2 attention weights (flattened row-major), or ``None`` without attention."""
    if not model.config.attention:
        return [None] * len(patches)
    out = []
    for p in patches:
        patch_probabilities(model, [p], gender)
        out.append(model.last_alpha[0].tolist())
    return out


# --- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coughscreen", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--log-level", default="WARNING", help="logging level (INFO shows training progress)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with configuration values")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration value")

    p = sub.add_parser("synth", help="generate a synthetic two-class corpus")
    p.add_argument("out_dir")
    p.add_argument("--n-per-class", dest="n_per_class", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sample-rate", dest="sample_rate", type=int)
    p.add_argument("--k-folds", dest="k_folds", type=int)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="resample, remove silence, render and cache patches")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--sad", choices=sorted(SAD_CHOICES))
    p.add_argument("--scale", choices=["log", "linear"])
    p.add_argument("--cmap", choices=["magma", "viridis"])
    p.add_argument("--image-px", dest="image_px", type=int)
    p.add_argument("--workers", type=int)
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="cross-validate, refit on all data, write a run directory")
    p.add_argument("cache")
    p.add_argument("manifest")
    p.add_argument("run_dir")
    p.add_argument("--attention", action="store_true", default=None)
    p.add_argument("--gender", choices=sorted(GENDER_CHOICES))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--k-folds", dest="k_folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="train folds in this many processes")
    p.add_argument("--shuffle-labels", dest="shuffle_labels", action="store_true", default=None,
                   help="permute labels across recordings (leakage control)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a manifest split with a run's final model(s)")
    p.add_argument("run_dir")
    p.add_argument("cache")
    p.add_argument("manifest")
    p.add_argument("--split", choices=["auto", "test", "all"])
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="score audio files with trained checkpoint(s)")
    p.add_argument("checkpoint", nargs="+", help="checkpoint.bin, or the _female and _male pair")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--audio", nargs="+")
    src.add_argument("--manifest")
    p.add_argument("--gender", choices=list(GENDERS), help="gender for --audio inputs")
    p.add_argument("--out", default="predictions.csv")
    p.add_argument("--verbose", action="store_true", default=None, help="also write per-patch scores and attention")
    p.add_argument("--workers", type=int, help="prepare recordings in this many processes")
    common(p)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ManifestError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (HarnessError, WavError, ValueError, KeyError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
