#!/usr/bin/env python3
"""
Harness - experiment runner for the PUF authentication pipeline.

Per seed: build fleets -> enroll -> split 3:1:1 -> train closed-set ->
train GAN -> calibrate tau on validation impostors -> evaluate on test
legit + test impostors. Seeds are aggregated as mean / std.

Outputs go under <out>/<name>-<config hash>/:
    results.json  machine-readable, sorted keys, no timestamps
    report.md     human-readable tables

Actions:
- simulate: dump raw responses and images of a fleet, report instability
- train: one seed; writes model manifest, server key and device provisioning files
- eval: evaluate a manifest on regenerated test splits
- run: full experiment over all seeds with report
- ablate: re-run the experiment per value of one axis
- report: re-render report.md from a results.json
"""

import asyncio
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from system_guard import (
    ABLATION_AXES,
    ConfigError,
    ExperimentConfig,
    load_experiment_config,
    validate_experiment_config,
)
from tools.auth_protocol import (
    DeviceRegistry,
    ImageSpec,
    ServerKeyPair,
    ServerState,
    build_auth_request,
    collect_images,
    enroll_fleet,
    exchange,
    start_auth_server,
    wire_overhead,
    write_provisioning,
)
from tools.errors import PufAuthError
from tools.imaging import generate_image, save_png, write_image_dump
from tools.openset_classifier import (
    LabeledDataset,
    MetricsReport,
    OpenSetModel,
    calibrate_threshold,
    closed_set_accuracy,
    evaluate,
    load_manifest,
    save_manifest,
    train_closed_set,
    train_open_gan,
)
from tools.puf_sim import build_fleet, evaluate_device, fleet_instability_report, write_response_dump
from tools.replay_filter import BloomFilter

logger = logging.getLogger(__name__)

BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_OUT_DIR = os.path.join(BASE_DIR, "runs")
METRIC_KEYS = ("closed_set_accuracy", "far", "frr", "auroc", "f1")
REFERENCE_WIRE_BYTES = 2958


# ============================================================================
# DATASETS
# ============================================================================

@dataclass
class DatasetSplits:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    val_impostor: LabeledDataset
    test_impostor: LabeledDataset


@dataclass
class TrainedRun:
    config: ExperimentConfig
    seed: int
    registry: DeviceRegistry
    splits: DatasetSplits
    legit_devices: list
    impostor_devices: list
    image: ImageSpec
    model: Optional[OpenSetModel] = None
    backbone: object = None
    warnings: List[str] = field(default_factory=list)


def image_spec(cfg: ExperimentConfig) -> ImageSpec:
    return ImageSpec(cfg.image_width, cfg.image_height, tuple(cfg.crop_offset), cfg.crop_mode,
                     tuple(cfg.norm_mean), tuple(cfg.norm_std))


def split_counts(n: int, ratio: Sequence[int] = (3, 1, 1)) -> Tuple[int, int, int]:
    """Val and test get floor shares (at least one each); train takes the remainder."""
    total = sum(ratio)
    n_val = max(1, n * ratio[1] // total)
    n_test = max(1, n * ratio[2] // total)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n} images cannot be split {ratio}")
    return n_train, n_val, n_test


def _subset(data: LabeledDataset, idx: np.ndarray, split: str) -> LabeledDataset:
    device_ids = data.device_ids[idx] if data.device_ids is not None else None
    return LabeledDataset(data.inputs[idx], data.labels[idx], split, device_ids)


def split_enrollment(data: LabeledDataset, ratio: Sequence[int]) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Per device, in capture order: the first images train, then val, then test."""
    parts = {"train": [], "val": [], "test": []}
    for device_id in dict.fromkeys(data.device_ids.tolist()):
        idx = np.flatnonzero(data.device_ids == device_id)
        n_train, n_val, _ = split_counts(len(idx), ratio)
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    return tuple(_subset(data, np.concatenate(parts[name]), name) for name in ("train", "val", "test"))


def split_impostor_devices(devices: list, val_fraction: float) -> Tuple[list, list]:
    """By device: no impostor device contributes to both calibration and test."""
    if len(devices) < 2:
        return [], list(devices)
    n_val = min(len(devices) - 1, max(1, int(len(devices) * val_fraction)))
    return list(devices[:n_val]), list(devices[n_val:])


def build_datasets(cfg: ExperimentConfig, seed: int, public_key=None) -> TrainedRun:
    image = image_spec(cfg)
    legit = build_fleet(cfg.fleet, "legit", master_seed=seed)
    enrolled, registry = enroll_fleet(legit, cfg.images_per_device, image, public_key=public_key)
    train, val, test = split_enrollment(enrolled, cfg.split_ratio)

    impostors = build_fleet(cfg.fleet, "impostors", master_seed=seed) if cfg.fleet.impostors else []
    val_devices, test_devices = split_impostor_devices(impostors, cfg.impostor_val_fraction)
    val_imp = collect_images(val_devices, cfg.images_per_device, image)
    test_imp = collect_images(test_devices, cfg.images_per_device, image)
    val_imp.split, test_imp.split = "val_impostor", "test_impostor"

    splits = DatasetSplits(train, val, test, val_imp, test_imp)
    logger.info(f"Seed {seed}: train={len(train)} val={len(val)} test={len(test)} "
                f"val_impostor={len(val_imp)} test_impostor={len(test_imp)}")
    return TrainedRun(cfg, seed, registry, splits, legit, impostors, image)


# ============================================================================
# PIPELINE
# ============================================================================

def train_seed(cfg: ExperimentConfig, seed: int, public_key=None) -> TrainedRun:
    run = build_datasets(cfg, seed, public_key)
    backbone = train_closed_set(run.splits.train, cfg.closed_set, seed, num_classes=len(run.registry),
                                norm_mean=cfg.norm_mean, norm_std=cfg.norm_std)
    run.backbone = backbone
    if not cfg.open_set:
        return run
    gan = train_open_gan(backbone, run.splits.train, cfg.gan, seed)
    run.model = calibrate_threshold(gan, backbone, run.splits.val, run.splits.val_impostor, cfg.threshold_rule)
    if run.model.low_separation:
        run.warnings.append(f"seed {seed}: LowSeparation (val AUROC {run.model.val_auroc:.3f})")
    return run


def _rounded(value):
    if value is None:
        return None
    return round(float(value), 6)


def seed_result(run: TrainedRun) -> Dict:
    if run.model is None:
        acc = closed_set_accuracy(run.backbone, run.splits.test)
        metrics = MetricsReport(acc, None, None, None, None, len(run.splits.test), 0)
        selection = {}
    else:
        metrics = evaluate(run.model, run.splits.test, run.splits.test_impostor)
        val = evaluate(run.model, run.splits.val, run.splits.val_impostor)
        selection = {
            "tau": _rounded(run.model.tau),
            "epoch": run.model.selected_epoch,
            "val_f1": _rounded(run.model.val_f1),
            "val_far": _rounded(val.far),
            "val_frr": _rounded(val.frr),
            "low_separation": run.model.low_separation,
        }
    return {
        "seed": run.seed,
        "metrics": {k: _rounded(v) if isinstance(v, float) else v for k, v in metrics.to_dict().items()},
        "selection": selection,
        "training": {
            "final_train_loss": _rounded(run.backbone.final_train_loss),
            "train_accuracy": _rounded(run.backbone.train_accuracy),
        },
        "warnings": list(run.warnings),
    }


def run_seed(cfg: ExperimentConfig, seed: int) -> Dict:
    return seed_result(train_seed(cfg, seed))


def _run_seed_worker(cfg_data: Dict, seed: int) -> Dict:
    import torch

    torch.set_num_threads(1)
    return run_seed(validate_experiment_config(cfg_data), seed)


def aggregate(per_seed: List[Dict]) -> Dict[str, Dict[str, Optional[float]]]:
    out = {}
    for key in METRIC_KEYS:
        values = [r["metrics"][key] for r in per_seed if r["metrics"].get(key) is not None]
        if not values:
            out[key] = {"mean": None, "std": None}
            continue
        out[key] = {"mean": _rounded(np.mean(values)), "std": _rounded(np.std(values))}
    return out


def _experiment(cfg: ExperimentConfig, keep_first: bool) -> Tuple[Dict, Optional[TrainedRun]]:
    cfg = validate_experiment_config(cfg)
    seeds = cfg.seeds
    logger.info(f"Experiment '{cfg.name}' ({cfg.config_hash()}): seeds {seeds}")
    first = None
    per_seed = []
    remaining = seeds
    if keep_first:
        first = train_seed(cfg, seeds[0])
        per_seed.append(seed_result(first))
        remaining = seeds[1:]
    if cfg.parallel_seeds > 1 and len(remaining) > 1:
        data = cfg.model_dump(mode="json")
        with ProcessPoolExecutor(max_workers=min(cfg.parallel_seeds, len(remaining))) as pool:
            per_seed += list(pool.map(_run_seed_worker, [data] * len(remaining), remaining))
    else:
        per_seed += [run_seed(cfg, s) for s in remaining]

    results = {
        "experiment": cfg.name,
        "config_hash": cfg.config_hash(),
        "config": cfg.model_dump(mode="json"),
        "master_seed": cfg.fleet.master_seed,
        "seeds": seeds,
        "per_seed": per_seed,
        "aggregate": aggregate(per_seed),
        "warnings": [w for r in per_seed for w in r["warnings"]],
    }
    if cfg.open_set:
        results["wire"] = {**wire_overhead(cfg.image_width, cfg.image_height), "reference_bytes": REFERENCE_WIRE_BYTES}
    return results, first


def run_experiment(cfg: ExperimentConfig) -> Dict:
    return _experiment(cfg, keep_first=False)[0]


def run_experiment_keeping_first(cfg: ExperimentConfig) -> Tuple[Dict, TrainedRun]:
    """Same results as run_experiment; the first seed's trained run is returned alongside."""
    return _experiment(cfg, keep_first=True)


def _variant(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    data = cfg.model_dump(mode="json")
    if axis == "image_size":
        if isinstance(value, str) and "x" in value:
            w, h = (int(v) for v in value.split("x"))
        else:
            w = h = int(value)
        data["image_width"], data["image_height"] = w, h
    elif axis == "n_d":
        data["gan"]["n_d"] = int(value)
    elif axis == "device_count":
        groups = data["fleet"]["legit"]
        base, extra = divmod(int(value), len(groups))
        for i, g in enumerate(groups):
            g["count"] = base + (1 if i < extra else 0)
        data["fleet"]["legit"] = [g for g in groups if g["count"] > 0]
        for g in data["fleet"]["legit"] + data["fleet"]["impostors"]:
            g["start_id"] = None
    else:
        raise ConfigError([f"ablation.axis: '{axis}' is not one of {', '.join(ABLATION_AXES)}"])
    data["name"] = f"{cfg.name}-{axis}-{value}"
    return validate_experiment_config(data)


def run_ablation(cfg: ExperimentConfig, axis: str, values: Sequence) -> Dict:
    if not values:
        raise ConfigError(["ablation.values: at least one value is required"])
    if axis not in ABLATION_AXES:
        raise ConfigError([f"ablation.axis: '{axis}' is not one of {', '.join(ABLATION_AXES)}"])
    # Validate every variant before spending time on any of them
    variants = []
    for value in values:
        try:
            variants.append((value, _variant(cfg, axis, value)))
        except ConfigError as e:
            raise ConfigError([f"ablation.{axis}={value}: {msg}" for msg in e.errors])
    rows = []
    for value, variant in variants:
        logger.info(f"Ablation {axis}={value}")
        res = run_experiment(variant)
        rows.append({"value": value, "config_hash": res["config_hash"], "aggregate": res["aggregate"],
                     "per_seed": res["per_seed"], "warnings": res["warnings"]})
    return {
        "experiment": f"{cfg.name}-ablation-{axis}",
        "config_hash": cfg.config_hash(),
        "config": cfg.model_dump(mode="json"),
        "master_seed": cfg.fleet.master_seed,
        "seeds": cfg.seeds,
        "axis": axis,
        "rows": rows,
    }


# ============================================================================
# MEASUREMENT
# ============================================================================

async def _loopback_exchange(state: ServerState, frame: bytes) -> Tuple[str, float]:
    server = await start_auth_server(state, "127.0.0.1", 0)
    port = server.sockets[0].getsockname()[1]
    try:
        start = time.perf_counter()
        responses = await exchange("127.0.0.1", port, [frame])
        elapsed = (time.perf_counter() - start) * 1000
    finally:
        server.close()
        await server.wait_closed()
    return responses[0].verdict, elapsed


def measure_auth_exchange(run: TrainedRun, keypair: Optional[ServerKeyPair] = None) -> Dict:
    """One full loopback cycle: request build, framing, server verdict."""
    keypair = keypair or ServerKeyPair.generate()
    state = ServerState(keypair, BloomFilter.for_capacity(10_000, 1e-4), run.model, run.registry)
    device = run.legit_devices[0]
    start = time.perf_counter()
    frame = build_auth_request(device, keypair.public_key, run.image).frame()
    build_ms = (time.perf_counter() - start) * 1000
    verdict, exchange_ms = asyncio.run(_loopback_exchange(state, frame))
    return {
        "framed_bytes": len(frame),
        "build_ms": round(build_ms, 2),
        "exchange_ms": round(exchange_ms, 2),
        "total_ms": round(build_ms + exchange_ms, 2),
        "verdict": verdict,
    }


# ============================================================================
# REPORTS
# ============================================================================

def _fmt(stat: Dict, percent: bool = True) -> str:
    if stat.get("mean") is None:
        return "-"
    scale = 100.0 if percent else 1.0
    return f"{stat['mean'] * scale:.2f} ± {stat['std'] * scale:.2f}"


def summary_table(aggregate_: Dict) -> pd.DataFrame:
    return pd.DataFrame([{
        "Accuracy (%)": _fmt(aggregate_["closed_set_accuracy"]),
        "FRR (%)": _fmt(aggregate_["frr"]),
        "FAR (%)": _fmt(aggregate_["far"]),
        "AUROC": _fmt(aggregate_["auroc"], percent=False),
        "F1 (%)": _fmt(aggregate_["f1"]),
    }])


def per_seed_table(per_seed: List[Dict]) -> pd.DataFrame:
    frame = pd.DataFrame([{"seed": r["seed"], **r["metrics"], "tau": r["selection"].get("tau")} for r in per_seed])
    return frame.set_index("seed")


def ablation_table(results: Dict) -> pd.DataFrame:
    rows = []
    for row in results["rows"]:
        agg = row["aggregate"]
        rows.append({
            results["axis"]: row["value"],
            "FRR (%)": _fmt(agg["frr"]),
            "FAR (%)": _fmt(agg["far"]),
            "F1 (%)": _fmt(agg["f1"]),
            "Accuracy (%)": _fmt(agg["closed_set_accuracy"]),
        })
    return pd.DataFrame(rows).set_index(results["axis"])


def render_report(results: Dict, measurement: Optional[Dict] = None) -> str:
    lines = [f"# {results['experiment']}", "",
             f"- config hash: `{results['config_hash']}`",
             f"- master seed: {results['master_seed']}",
             f"- seeds: {', '.join(str(s) for s in results['seeds'])}", ""]
    if "rows" in results:
        lines += [f"## Ablation over {results['axis']} (mean ± std)", "", "```",
                  ablation_table(results).to_string(), "```", ""]
        for row in results["rows"]:
            lines += [f"### {results['axis']} = {row['value']}", "", "```",
                      per_seed_table(row["per_seed"]).to_string(), "```", ""]
    else:
        lines += ["## Summary (mean ± std over seeds)", "", "```", summary_table(results["aggregate"]).to_string(index=False),
                  "```", "", "## Per seed", "", "```", per_seed_table(results["per_seed"]).to_string(), "```", ""]
    if results.get("wire"):
        w = results["wire"]
        lines += ["## Wire overhead", "",
                  f"- request: {w['request_bytes']} bytes ({w['framed_bytes']} framed), "
                  f"M1 {w['m1_bytes']} + M2 {w['m2_bytes']}",
                  f"- reference prototype: {w['reference_bytes']} bytes", ""]
    if measurement:
        lines += ["## Loopback latency", "",
                  f"- build {measurement['build_ms']} ms, exchange {measurement['exchange_ms']} ms, "
                  f"total {measurement['total_ms']} ms (verdict: {measurement['verdict']})", ""]
    warnings = results.get("warnings") or [w for r in results.get("rows", []) for w in r["warnings"]]
    if warnings:
        lines += ["## Warnings", ""] + [f"- {w}" for w in warnings] + [""]
    return "\n".join(lines)


def run_directory(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> str:
    return os.path.join(out_dir or DEFAULT_OUT_DIR, f"{cfg.name}-{cfg.config_hash()}")


def emit_report(results: Dict, out_dir: str, measurement: Optional[Dict] = None) -> Dict[str, str]:
    if not results or not (results.get("per_seed") or results.get("rows")):
        raise ValueError("results are empty")
    os.makedirs(out_dir, exist_ok=True)
    results_path = os.path.join(out_dir, "results.json")
    report_path = os.path.join(out_dir, "report.md")
    with open(results_path, "w", encoding="utf-8") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(render_report(results, measurement))
    logger.info(f"Report written to {out_dir}")
    return {"results": results_path, "report": report_path}


# ============================================================================
# CLI OPERATIONS
# ============================================================================

def simulate(cfg: ExperimentConfig, out_dir: str, png: bool = False, readouts: int = 101) -> Dict:
    image = image_spec(cfg)
    summary = {}
    for role in ("legit", "impostors"):
        devices = build_fleet(cfg.fleet, role) if (role == "legit" or cfg.fleet.impostors) else []
        for device in devices:
            stem = os.path.join(out_dir, role, f"device_{device.device_id}")
            write_response_dump(f"{stem}.pufr", device.device_id, evaluate_device(device, 8 * image.width * image.height))
            img = generate_image(device, image.width, image.height, image.crop_offset, image.crop_mode)
            write_image_dump(f"{stem}.pufi", img)
            if png:
                save_png(f"{stem}.png", img)
        if devices:
            report = fleet_instability_report(devices, readouts, 8 * image.width * image.height)
            summary[role] = {
                "devices": len(devices),
                "mean_instability": round(report["mean"], 6),
                "max_instability": round(report["max"], 6),
                "per_device": {str(k): round(v, 6) for k, v in report["per_device"].items()},
            }
    return summary


def train(cfg: ExperimentConfig, out_dir: str, seed_index: int = 0) -> Dict:
    if not cfg.open_set:
        raise ConfigError(["open_set: training a server model requires open_set = true"])
    seed = cfg.seeds[seed_index]
    keypair = ServerKeyPair.generate()
    run = train_seed(cfg, seed, keypair.public_key)
    manifest_path = os.path.join(out_dir, "model.pt")
    key_path = os.path.join(out_dir, "server_key.pem")
    save_manifest(manifest_path, run.model, extra={
        "registry": run.registry.to_dict(),
        "lfsr_taps": list(cfg.fleet.lfsr_taps),
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "image": {"width": cfg.image_width, "height": cfg.image_height,
                  "crop_offset": list(cfg.crop_offset), "crop_mode": cfg.crop_mode},
    })
    keypair.save(key_path)

    groups = {}
    for group in cfg.fleet.legit:
        for device_id in range(group.start_id, group.start_id + group.count):
            groups[device_id] = group
    provision_dir = os.path.join(out_dir, "provision")
    for device in run.legit_devices:
        write_provisioning(os.path.join(provision_dir, f"device_{device.device_id}.json"), device,
                           groups[device.device_id], seed, cfg.fleet.lfsr_width, keypair.public_key, run.image)
    result = seed_result(run)
    return {"manifest": manifest_path, "server_key": key_path, "provision_dir": provision_dir,
            "seed": seed, **result}


def evaluate_manifest(cfg: ExperimentConfig, manifest_path: str) -> Dict:
    model, extra = load_manifest(manifest_path)
    if extra.get("config_hash") and extra["config_hash"] != cfg.config_hash():
        logger.warning(f"Manifest was trained with config {extra['config_hash']}, evaluating with {cfg.config_hash()}")
    seed = int(extra.get("seed", cfg.seeds[0]))
    run = build_datasets(cfg, seed)
    run.model = model
    run.backbone = model.backbone
    return seed_result(run)


# ============================================================================
# ACTIONS
# ============================================================================

ACTIONS = {
    "simulate": {"description": "Dump fleet responses/images and report instability.",
                 "params": {"config": {"type": "string"}, "out": {"type": "string"}, "png": {"type": "boolean"}}},
    "train": {"description": "Train one seed and write manifest, key and provisioning files.",
              "params": {"config": {"type": "string"}, "out": {"type": "string"}}},
    "eval": {"description": "Evaluate a manifest on regenerated test splits.",
             "params": {"config": {"type": "string"}, "model": {"type": "string", "required": True}}},
    "run": {"description": "Full experiment over all seeds with report.",
            "params": {"config": {"type": "string"}, "out": {"type": "string"}}},
    "ablate": {"description": "Experiment per value of one ablation axis.",
               "params": {"config": {"type": "string"}, "axis": {"type": "string", "required": True},
                          "values": {"type": "array", "required": True}, "out": {"type": "string"}}},
    "report": {"description": "Re-render report.md from results.json.",
               "params": {"results": {"type": "string", "required": True}}},
}


def _values(raw) -> list:
    if isinstance(raw, str):
        return [v.strip() for v in raw.split(",") if v.strip()]
    return list(raw or [])


def execute(action, params):
    try:
        if action == "report":
            if not params.get("results"):
                return {"status": "error", "message": "Missing required param: results"}
            with open(params["results"], "r", encoding="utf-8") as f:
                results = json.load(f)
            out = os.path.dirname(os.path.abspath(params["results"]))
            report_path = os.path.join(out, "report.md")
            with open(report_path, "w", encoding="utf-8") as f:
                f.write(render_report(results))
            return {"status": "success", "report": report_path}

        cfg = load_experiment_config(params.get("config"), params.get("overrides"))
        out = params.get("out") or run_directory(cfg)

        if action == "simulate":
            summary = simulate(cfg, out, bool(params.get("png", False)), int(params.get("readouts", 101)))
            return {"status": "success", "out": out, **summary}
        elif action == "train":
            return {"status": "success", **train(cfg, out, int(params.get("seed_index", 0)))}
        elif action == "eval":
            if not params.get("model"):
                return {"status": "error", "message": "Missing required param: model"}
            return {"status": "success", **evaluate_manifest(cfg, params["model"])}
        elif action == "run":
            measurement = None
            if cfg.open_set and params.get("measure", True):
                results, first = run_experiment_keeping_first(cfg)
                measurement = measure_auth_exchange(first)
            else:
                results = run_experiment(cfg)
            paths = emit_report(results, out, measurement)
            return {"status": "success", **paths, "aggregate": results["aggregate"], "warnings": results["warnings"]}
        elif action == "ablate":
            if not params.get("axis"):
                return {"status": "error", "message": "Missing required param: axis"}
            results = run_ablation(cfg, params["axis"], _values(params.get("values")))
            out = params.get("out") or os.path.join(DEFAULT_OUT_DIR, f"{results['experiment']}-{cfg.config_hash()}")
            paths = emit_report(results, out)
            return {"status": "success", **paths,
                    "rows": [{"value": r["value"], "aggregate": r["aggregate"]} for r in results["rows"]]}
        return {"status": "error", "message": f"Unknown action: {action}"}
    except ConfigError as e:
        return {"status": "error", "message": "Invalid configuration", "errors": e.errors}
    except (PufAuthError, ValueError, OSError) as e:
        return {"status": "error", "message": str(e)}


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
    if len(sys.argv) < 2:
        print(json.dumps({"status": "error", "message": "No action specified"}))
        sys.exit(1)
    params = {}
    for i, arg in enumerate(sys.argv):
        if arg == "--params" and i + 1 < len(sys.argv):
            params = json.loads(sys.argv[i + 1])
            break
    print(json.dumps(execute(sys.argv[1], params), indent=2))
