"""Pipeline subcommands: synth, encode, split, train, eval, explain, bench, report.

Every stage writes versioned artifacts into the run directory and appends
a manifest line (stage, input/output hashes, seed, config hash, wall
time). A lock file guards the run directory against concurrent
invocations. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric error, 5 missing upstream artifact.

Heavy imports happen inside the command handlers so the
``TRAFFICLENS_THREADS`` environment variable can pin BLAS thread counts
before numpy loads.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import hashlib
import json
import os
import sys
import time
from pathlib import Path

_EXIT_CODES = {
    "ConfigError": 2,
    "DataError": 3,
    "NumericError": 4,
    "DependencyError": 5,
}

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "run",
    "csv": None,
    "label_column": "Label",
    "schema": None,
    "encode": {"width": 60, "records_per_image": 180},
    "split": {"val_frac": 0.2, "test_frac": 0.2},
    "models": [
        {"name": "micro_mobile", "family": "micro_mobile", "width": 1.0, "blocks": 3, "dense_units": 64},
        {"name": "micro_dense", "family": "micro_dense", "width": 1.0, "blocks": 3, "dense_units": 64},
    ],
    "train": {
        "epochs": 30,
        "batch_size": 32,
        "learning_rate": 0.001,
        "momentum": 0.9,
        "plateau_factor": 0.5,
        "plateau_patience": 3,
        "monitor": "val_loss",
        "trainable_fraction": 0.2,
    },
    "explain": {
        "samples_per_class": 2,
        "region_cells": 6,
        "shap_budget": 200,
        "intensity_threshold": 10.0 / 255.0,
    },
    "bench": {"trials": 5},
    "synth": {"classes": 4, "images_per_class": 500, "features": 36},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _validate_config(cfg: dict) -> list[str]:
    problems = []
    if not isinstance(cfg.get("seed"), int):
        problems.append("seed must be an integer")
    for section, fields in {
        "split": {"val_frac": float, "test_frac": float},
        "train": {"epochs": int, "batch_size": int, "learning_rate": (int, float)},
        "bench": {"trials": int},
        "explain": {"samples_per_class": int, "shap_budget": int, "region_cells": int},
    }.items():
        for name, kind in fields.items():
            value = cfg.get(section, {}).get(name)
            if not isinstance(value, kind) or isinstance(value, bool):
                problems.append(f"{section}.{name} must be {kind}, got {value!r}")
    if not cfg.get("models"):
        problems.append("models list must not be empty")
    else:
        seen = set()
        for i, m in enumerate(cfg["models"]):
            name = m.get("name") or m.get("family")
            if not m.get("family"):
                problems.append(f"models[{i}] missing family")
            if name in seen:
                problems.append(f"duplicate model name {name!r}")
            seen.add(name)
    for frac_name in ("val_frac", "test_frac"):
        value = cfg.get("split", {}).get(frac_name)
        if isinstance(value, float) and not 0.0 < value < 1.0:
            problems.append(f"split.{frac_name} must be in (0, 1), got {value}")
    return problems


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    from .errors import ConfigError

    cfg = DEFAULT_CONFIG
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    problems = _validate_config(cfg)
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def _config_hash(cfg: dict) -> str:
    raw = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(raw).hexdigest()[:16]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _append_manifest(run_dir: Path, stage: str, inputs: list[Path], outputs: list[Path],
                     seed: int, cfg_hash: str, wall: float) -> None:
    line = {
        "stage": stage,
        "inputs": {str(p): _sha256(p) for p in inputs if p.exists()},
        "outputs": {str(p): _sha256(p) for p in outputs if p.exists()},
        "seed": seed,
        "config_hash": cfg_hash,
        "wall_time_s": round(wall, 3),
    }
    with open(run_dir / "manifest.jsonl", "a") as fh:
        fh.write(json.dumps(line, sort_keys=True) + "\n")


@contextlib.contextmanager
def _run_lock(run_dir: Path):
    from .errors import ConfigError

    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory is locked by another invocation: {lock}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require(path: Path, hint: str) -> Path:
    from .errors import DependencyError

    if not path.exists():
        raise DependencyError(f"missing upstream artifact: {path} ({hint})")
    return path


def _model_configs(cfg: dict, only: str | None, n_classes: int | None = None):
    from .errors import ConfigError
    from .models import ModelConfig

    chosen = cfg["models"]
    if only is not None:
        chosen = [m for m in chosen if (m.get("name") or m.get("family")) == only]
        if not chosen:
            raise ConfigError(f"model {only!r} not present in configuration")
    return [
        ModelConfig(
            family=m["family"],
            n_classes=n_classes or m.get("n_classes", cfg["synth"]["classes"]),
            name=m.get("name"),
            width=m.get("width", 1.0),
            blocks=m.get("blocks", 3),
            dense_units=m.get("dense_units", 64),
        )
        for m in chosen
    ]


# --- stages -------------------------------------------------------------------


def cmd_synth(cfg: dict, run_dir: Path) -> list[Path]:
    from .synth import synthetic_flows, write_flow_csv

    s = cfg["synth"]
    frame = synthetic_flows(
        n_classes=s["classes"],
        records_per_class=s["images_per_class"] * cfg["encode"]["records_per_image"],
        n_features=s["features"],
        seed=cfg["seed"],
    )
    out = run_dir / "flows.csv"
    write_flow_csv(frame, out)
    print(f"synth: wrote {len(frame)} records, {s['classes']} classes -> {out}")
    return [out]


def cmd_encode(cfg: dict, run_dir: Path) -> list[Path]:
    from .errors import ConfigError
    from .flows import FlowSchema, clean, parse_flows
    from .imaging import encode_images, save_dataset

    csv_path = cfg.get("csv") or str(run_dir / "flows.csv")
    _require(Path(csv_path), "provide csv in config or run synth first")
    schema = FlowSchema(label_column=cfg["label_column"])
    if cfg.get("schema"):
        schema = FlowSchema.from_json(cfg["schema"])
    table = parse_flows(csv_path, schema)
    cleaned, report = clean(table)
    dataset = encode_images(
        cleaned,
        width=cfg["encode"]["width"],
        records_per_image=cfg["encode"]["records_per_image"],
    )
    if len(dataset) == 0:
        raise ConfigError("encoding produced zero images; check records per class")
    out = run_dir / "dataset.trim"
    save_dataset(dataset, None, out)
    print(
        f"encode: {cleaned.n_records} cleaned records -> {len(dataset)} images "
        f"(dups {report.duplicates_removed}, incomplete {report.incomplete_removed}, "
        f"constant cols {len(report.constant_columns_removed)}) -> {out}"
    )
    return [out]


def cmd_split(cfg: dict, run_dir: Path) -> list[Path]:
    from .imaging import load_dataset, save_dataset, stratified_split

    path = _require(run_dir / "dataset.trim", "run encode first")
    dataset, _ = load_dataset(path)
    split = stratified_split(
        dataset,
        val_frac=cfg["split"]["val_frac"],
        test_frac=cfg["split"]["test_frac"],
        seed=cfg["seed"],
    )
    save_dataset(dataset, split, path)
    print(
        f"split: train {len(split.train)} / val {len(split.validation)} / "
        f"test {len(split.test)} (seed {cfg['seed']}) -> {path}"
    )
    return [path]


def _load_split_dataset(run_dir: Path):
    from .errors import DependencyError
    from .imaging import load_dataset

    path = _require(run_dir / "dataset.trim", "run encode first")
    dataset, split = load_dataset(path)
    if split is None:
        raise DependencyError(f"missing upstream artifact: split block in {path} (run split first)")
    return dataset, split


def cmd_train(cfg: dict, run_dir: Path, only: str | None) -> list[Path]:
    import numpy as np

    from .bench import time_training
    from .models import build, save_model, train
    from .optim import TrainConfig

    dataset, split = _load_split_dataset(run_dir)
    tr = cfg["train"]
    outputs = []
    (run_dir / "models").mkdir(exist_ok=True)
    for mc in _model_configs(cfg, only, n_classes=dataset.n_classes):
        model = build(mc, seed=cfg["seed"])
        tconf = TrainConfig(
            epochs=tr["epochs"],
            batch_size=tr["batch_size"],
            learning_rate=tr["learning_rate"],
            momentum=tr["momentum"],
            plateau_factor=tr["plateau_factor"],
            plateau_patience=tr["plateau_patience"],
            monitor=tr["monitor"],
            trainable_fraction=tr["trainable_fraction"],
            seed=cfg["seed"],
        )
        wall, (_, history) = time_training(lambda: train(model, dataset, split, tconf))
        ckpt = run_dir / "models" / f"{model.name}.ckpt"
        save_model(model, ckpt)
        hist_path = run_dir / f"history_{model.name}.csv"
        history.to_csv(hist_path)
        meta = {
            "model": model.name,
            "train_wall_time_s": wall,
            "seed": cfg["seed"],
            "summary": model.summary(),
        }
        meta_path = run_dir / "models" / f"{model.name}_meta.json"
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
        outputs += [ckpt, hist_path, meta_path]
        print(
            f"train[{model.name}]: {len(history)} epochs, "
            f"final val_acc {history.val_acc[-1]:.4f}, wall {wall:.1f}s -> {ckpt}"
        )
    return outputs


def _load_models(cfg: dict, run_dir: Path, only: str | None):
    from .models import load_model

    models = []
    for mc in _model_configs(cfg, only):
        ckpt = _require(run_dir / "models" / f"{mc.name}.ckpt", "run train first")
        models.append(load_model(ckpt))
    return models


def cmd_eval(cfg: dict, run_dir: Path, only: str | None) -> list[Path]:
    from .metrics import compute_report
    from .models import predict

    dataset, split = _load_split_dataset(run_dir)
    out_dir = run_dir / "eval"
    out_dir.mkdir(exist_ok=True)
    outputs = []
    for model in _load_models(cfg, run_dir, only):
        preds = predict(model, dataset, split.test)
        report, cm, roc = compute_report(preds, model=model.name)
        payload = {
            "metrics": report.as_dict(),
            "confusion": cm.counts.tolist(),
            "class_names": list(cm.class_names),
            "roc": {
                c.class_name: {"auc": c.auc, "fpr": c.fpr.tolist(), "tpr": c.tpr.tolist()}
                for c in roc.curves
            },
        }
        path = out_dir / f"{model.name}.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        outputs.append(path)
        print(
            f"eval[{model.name}]: acc {report.accuracy:.4f}, mcc "
            f"{report.mcc if report.mcc is None else round(report.mcc, 4)}, "
            f"macro AUC {report.auc_macro if report.auc_macro is None else round(report.auc_macro, 4)}"
        )
    return outputs


def cmd_explain(cfg: dict, run_dir: Path, only: str | None) -> list[Path]:
    import numpy as np

    from .explain import (
        ExplainQualityReport,
        background_suppression,
        class_consistency,
        class_score_fn,
        grad_cam,
        kernel_shap,
        overlay_png_bytes,
        region_grid,
        shap_summary,
        spatial_compactness,
        to_float_image,
    )
    from .models import predict

    dataset, split = _load_split_dataset(run_dir)
    ex = cfg["explain"]
    out_dir = run_dir / "explain"
    out_dir.mkdir(exist_ok=True)
    outputs = []
    for model in _load_models(cfg, run_dir, only):
        maps_dir = out_dir / model.name
        maps_dir.mkdir(exist_ok=True)
        per_class: dict[int, list] = {}
        shap_maps = []
        compact, suppress = [], []
        regions = region_grid(ex["region_cells"], size=dataset.pixels.shape[1])
        for k in range(dataset.n_classes):
            test_k = [i for i in split.test.tolist() if dataset.labels[i] == k]
            for i in test_k[: ex["samples_per_class"]]:
                image = dataset.image(i)
                cam = grad_cam(model, image, target_class=k)
                per_class.setdefault(k, []).append(cam)
                compact.append(spatial_compactness(cam))
                suppress.append(
                    background_suppression(cam, image, ex["intensity_threshold"])
                )
                shap_map = kernel_shap(
                    class_score_fn(model, k),
                    image,
                    regions=regions,
                    budget=ex["shap_budget"],
                    seed=cfg["seed"],
                    target_class=k,
                )
                shap_maps.append(shap_map)
                stem = maps_dir / f"class{k}_idx{i}"
                np.savetxt(f"{stem}_gradcam.csv", cam.values, delimiter=",")
                np.savetxt(f"{stem}_shap.csv", shap_map.values, delimiter=",")
                Path(f"{stem}_gradcam.png").write_bytes(overlay_png_bytes(cam, image))
                Path(f"{stem}_shap.png").write_bytes(overlay_png_bytes(shap_map, image))
        magnitude, separation = shap_summary(shap_maps)
        quality = ExplainQualityReport(
            model=model.name,
            spatial_compactness=float(np.mean(compact)),
            background_suppression=float(np.mean(suppress)),
            class_consistency=class_consistency(per_class),
            shap_magnitude=magnitude,
            pos_neg_separation=separation,
        )
        path = out_dir / f"{model.name}_quality.json"
        path.write_text(json.dumps(quality.as_dict(), indent=2, sort_keys=True))
        outputs.append(path)
        print(
            f"explain[{model.name}]: compactness {quality.spatial_compactness:.3f}, "
            f"suppression {quality.background_suppression:.3f}, "
            f"consistency {quality.class_consistency:.3f}"
        )
    return outputs


def cmd_bench(cfg: dict, run_dir: Path, only: str | None) -> list[Path]:
    from .bench import BenchReport, time_inference

    dataset, split = _load_split_dataset(run_dir)
    out_dir = run_dir / "bench"
    out_dir.mkdir(exist_ok=True)
    outputs = []
    test_pixels = dataset.pixels[split.test]
    for model in _load_models(cfg, run_dir, only):
        meta_path = _require(
            run_dir / "models" / f"{model.name}_meta.json", "run train first"
        )
        train_wall = json.loads(meta_path.read_text())["train_wall_time_s"]
        mean, std = time_inference(model.predict_probs, test_pixels, trials=cfg["bench"]["trials"])
        report = BenchReport(
            model=model.name,
            train_wall_time_s=train_wall,
            inference_mean_s=mean,
            inference_std_s=std,
            trials=cfg["bench"]["trials"],
            sample_count=len(test_pixels),
            environment=f"python {sys.version.split()[0]}",
        )
        path = out_dir / f"{model.name}.json"
        path.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True))
        outputs.append(path)
        print(f"bench[{model.name}]: {mean * 1e3:.3f} ms/sample over {report.trials} trials")
    return outputs


def cmd_report(cfg: dict, run_dir: Path) -> list[Path]:
    import numpy as np

    from .bench import BenchReport, emit_report
    from .explain import ExplainQualityReport
    from .metrics import ConfusionMatrix, MetricsReport, RocCurve, RocResult
    from .optim import TrainHistory

    metrics, bench, quality = [], [], []
    histories, confusions, rocs = {}, {}, {}
    for m in cfg["models"]:
        name = m.get("name") or m.get("family")
        eval_path = _require(run_dir / "eval" / f"{name}.json", "run eval first")
        payload = json.loads(eval_path.read_text())
        metrics.append(MetricsReport.from_dict(payload["metrics"]))
        confusions[name] = ConfusionMatrix(
            counts=np.array(payload["confusion"], dtype=np.int64),
            class_names=payload["class_names"],
        )
        curves = [
            RocCurve(class_name=c, fpr=np.array(v["fpr"]), tpr=np.array(v["tpr"]), auc=v["auc"])
            for c, v in sorted(payload["roc"].items())
        ]
        macro = float(np.mean([c.auc for c in curves])) if curves else float("nan")
        rocs[name] = RocResult(curves=curves, macro_auc=macro)
        bench_path = _require(run_dir / "bench" / f"{name}.json", "run bench first")
        bench.append(BenchReport.from_dict(json.loads(bench_path.read_text())))
        quality_path = _require(run_dir / "explain" / f"{name}_quality.json", "run explain first")
        quality.append(ExplainQualityReport.from_dict(json.loads(quality_path.read_text())))
        histories[name] = TrainHistory.from_csv(
            _require(run_dir / f"history_{name}.csv", "run train first")
        )
    out_dir = run_dir / "report"
    emit_report(metrics, bench, quality, histories, out_dir, confusions=confusions, rocs=rocs)
    print(f"report: bundle written to {out_dir}")
    return sorted(out_dir.iterdir())


# --- entry point --------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trafficlens",
        description="Image-encoded DDoS flow classification, reliability metrics, "
        "attribution, and benchmarking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_model in [
        ("synth", False),
        ("encode", False),
        ("split", False),
        ("train", True),
        ("eval", True),
        ("explain", True),
        ("bench", True),
        ("report", False),
    ]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="run directory (default: config out_dir)")
        if needs_model:
            p.add_argument("--model", help="restrict to one configured model")
        if name == "encode":
            p.add_argument("--csv", help="input flow CSV (default: <run>/flows.csv)")
        if name == "synth":
            p.add_argument("--images-per-class", type=int, dest="images_per_class")
            p.add_argument("--classes", type=int)
        if name == "train":
            p.add_argument("--epochs", type=int)
    return parser


def _apply_thread_env() -> None:
    threads = os.environ.get("TRAFFICLENS_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def main(argv: list[str] | None = None) -> int:
    _apply_thread_env()
    args = _build_parser().parse_args(argv)

    from .errors import ConfigError, DataError, DependencyError, NumericError, TrafficLensError

    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if getattr(args, "csv", None):
        overrides["csv"] = args.csv
    if getattr(args, "images_per_class", None):
        overrides["synth"] = {"images_per_class": args.images_per_class}
    if getattr(args, "classes", None):
        overrides.setdefault("synth", {})["classes"] = args.classes
    if getattr(args, "epochs", None):
        overrides["train"] = {"epochs": args.epochs}

    try:
        cfg = load_config(args.config, overrides)
        run_dir = Path(cfg["out_dir"])
        cfg_hash = _config_hash(cfg)
        with _run_lock(run_dir):
            t0 = time.perf_counter()
            model_arg = getattr(args, "model", None)
            if args.command == "synth":
                outputs = cmd_synth(cfg, run_dir)
            elif args.command == "encode":
                outputs = cmd_encode(cfg, run_dir)
            elif args.command == "split":
                outputs = cmd_split(cfg, run_dir)
            elif args.command == "train":
                outputs = cmd_train(cfg, run_dir, model_arg)
            elif args.command == "eval":
                outputs = cmd_eval(cfg, run_dir, model_arg)
            elif args.command == "explain":
                outputs = cmd_explain(cfg, run_dir, model_arg)
            elif args.command == "bench":
                outputs = cmd_bench(cfg, run_dir, model_arg)
            else:
                outputs = cmd_report(cfg, run_dir)
            _append_manifest(
                run_dir, args.command, [], outputs, cfg["seed"], cfg_hash,
                time.perf_counter() - t0,
            )
        return 0
    except TrafficLensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for cls in type(exc).__mro__:
            if cls.__name__ in _EXIT_CODES:
                return _EXIT_CODES[cls.__name__]
        return 1


if __name__ == "__main__":
    sys.exit(main())
