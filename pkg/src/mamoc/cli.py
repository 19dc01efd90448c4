"""Command-line pipeline: dataset simulation, the two training phases,
scan correction, and evaluation with report emission.

Every command resolves a JSON config (file plus ``--set`` overrides over
built-in defaults), writes the resolved config next to its outputs, and
is bit-reproducible from that echo. Exit codes: 0 success, 2 config
error, 3 I/O error, 4 shape or data error.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import forge, metrics
from .errors import (
    BadConfig,
    BadEpsilon,
    BadProbability,
    BadSeverity,
    BadSpec,
    ConfigError,
    DegenerateFraction,
    IoFailure,
    MamocError,
    ManifestError,
    MissingCheckpoint,
    ShapeMismatch,
)
from .inference import InferenceConfig, correct_scan
from .network import ModelConfig, init_parameters, load_checkpoint, save_checkpoint
from .training import OptimizerState, TrainConfig, finetune_step, pretrain_step
from .volume_io import (
    LabelVolume,
    Volume,
    load_scan,
    resample_volume,
    save_nifti,
    save_volume,
    split_by_subject,
)

DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {
        "dir": "runs/data",
        "subjects": 8,
        "side": 32,
        "noise_sigma": 0.02,
        "severities": ["moderate", "heavy"],
        "train_fraction": 0.75,
        "seed": 7,
        "split_seed": 1,
    },
    "model": {
        "side": 32,
        "base_channels": 12,
        "depth": 2,
        "blocks_per_stage": 1,
        "window": 4,
        "heads": 2,
        "mlp_ratio": 4.0,
        "gate_hidden": 8,
        "init_seed": 1,
    },
    "pretrain": {
        "dir": "runs/pretrain",
        "steps": 500,
        "batch_size": 2,
        "learning_rate": 1e-4,
        "weight_decay": 0.1,
        "beta1": 0.9,
        "beta2": 0.99,
        "keep_prob_min": 0.0,
        "keep_prob_max": 1.0,
        "block_side": 4,
        "seed": 11,
        "checkpoint_every": 250,
        "resume_from": None,
    },
    "finetune": {
        "dir": "runs/finetune",
        "steps": 500,
        "batch_size": 2,
        "learning_rate": 1e-4,
        "weight_decay": 0.1,
        "beta1": 0.9,
        "beta2": 0.99,
        "keep_prob_min": 0.0,
        "keep_prob_max": 1.0,
        "block_side": 4,
        "seed": 12,
        "checkpoint_every": 250,
        "resume_from": None,
        "cold_start": False,
        "init_checkpoint": None,
    },
    "inference": {
        "keep_prob": 0.6,
        "passes": 8,
        "seed": 99,
        "block_side": 4,
        "checkpoint": None,
    },
    "eval": {
        "dir": "runs/eval",
        "peak": None,
        "ssim_window": 11,
        "ssim_sigma": 1.5,
    },
}

FINAL_CHECKPOINT = "model_final.ckpt"


# ---------------------------------------------------------------------------
# Config resolution


def _merge_section(section: str, base: dict, user: dict) -> dict:
    merged = dict(base)
    for key, value in user.items():
        if key not in base:
            raise ConfigError(f"unknown config key {section}.{key}")
        merged[key] = value
    return merged


def resolve_config(config_path: str | None, overrides: Sequence[str]) -> dict:
    """Built-in defaults, overlaid with the config file, then --set pairs."""
    resolved = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        try:
            raw = Path(config_path).read_text()
        except OSError as exc:
            raise IoFailure(f"cannot read config {config_path}: {exc}") from exc
        try:
            user = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object of sections")
        for section, content in user.items():
            if section not in resolved:
                raise ConfigError(f"unknown config section {section}")
            if not isinstance(content, dict):
                raise ConfigError(f"config section {section} must be an object")
            resolved[section] = _merge_section(section, resolved[section], content)
    for pair in overrides:
        if "=" not in pair:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        dotted, text = pair.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        section, key = parts
        if section not in resolved or key not in resolved[section]:
            raise ConfigError(f"unknown config key {dotted}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        resolved[section][key] = value
    _validate(resolved)
    return resolved


def _validate(config: dict) -> None:
    severities = config["data"]["severities"]
    if not isinstance(severities, list) or not severities:
        raise ConfigError("data.severities must be a nonempty list")
    for severity in severities:
        if severity not in forge.SEVERITY_BOUNDS:
            raise ConfigError(f"data.severities holds unknown severity {severity!r}")
    if config["data"]["subjects"] < 1:
        raise ConfigError("data.subjects must be at least 1")
    if not 0.0 < config["data"]["train_fraction"] < 1.0:
        raise ConfigError("data.train_fraction must lie strictly inside (0, 1)")


def write_echo(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_echo.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n"
    )


def model_config(config: dict) -> ModelConfig:
    section = config["model"]
    return ModelConfig(
        side=section["side"],
        base_channels=section["base_channels"],
        depth=section["depth"],
        blocks_per_stage=section["blocks_per_stage"],
        window=section["window"],
        heads=section["heads"],
        mlp_ratio=section["mlp_ratio"],
        gate_hidden=section["gate_hidden"],
    )


def train_config(config: dict, phase: str) -> TrainConfig:
    section = config[phase]
    return TrainConfig(
        phase=phase,
        learning_rate=section["learning_rate"],
        weight_decay=section["weight_decay"],
        beta1=section["beta1"],
        beta2=section["beta2"],
        batch_size=section["batch_size"],
        steps=section["steps"],
        keep_prob_range=(section["keep_prob_min"], section["keep_prob_max"]),
        block_side=section["block_side"],
        seed=section["seed"],
    )


def inference_config(config: dict) -> InferenceConfig:
    section = config["inference"]
    return InferenceConfig(
        keep_prob=section["keep_prob"],
        passes=section["passes"],
        seed=section["seed"],
        block_side=section["block_side"],
    )


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(config: dict) -> None:
    data = config["data"]
    out_dir = Path(data["dir"])
    spec = forge.PhantomSpec(side=data["side"], noise_sigma=data["noise_sigma"], seed=data["seed"])
    records = forge.make_paired_dataset(data["subjects"], spec, seed=data["seed"])
    wanted = set(data["severities"]) | {"clean"}
    for record in records:
        record.scans = {tag: vol for tag, vol in record.scans.items() if tag in wanted}
        record.trajectories = {
            tag: trajectory
            for tag, trajectory in record.trajectories.items()
            if tag in wanted
        }
    split = split_by_subject(
        [r.subject_id for r in records], data["train_fraction"], data["split_seed"]
    )
    for record in records:
        record.split = "train" if record.subject_id in split.train else "test"
    manifest = forge.save_dataset(records, out_dir)
    write_echo(config, out_dir)
    print(
        f"simulated {len(records)} subjects "
        f"({len(split.train)} train, {len(split.test)} test) -> {manifest}"
    )


def _load_split(config: dict, split: str):
    manifest = Path(config["data"]["dir"]) / "manifest.jsonl"
    records = forge.load_dataset(manifest)
    picked = [r for r in records if r.split == split]
    if not picked:
        raise ManifestError(f"manifest has no records in the {split!r} split")
    return picked


def _run_training(config: dict, phase: str) -> Path:
    section = config[phase]
    out_dir = Path(section["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_echo(config, out_dir)
    tc = train_config(config, phase)
    records = _load_split(config, "train")

    if section.get("resume_from"):
        ckpt = load_checkpoint(section["resume_from"])
        params, start = ckpt.params, ckpt.step
        state = OptimizerState(momentum=dict(ckpt.optimizer), step=ckpt.step)
        if not state.momentum:
            state = OptimizerState.initial(params)
    elif phase == "finetune":
        init_path = section.get("init_checkpoint") or (
            Path(config["pretrain"]["dir"]) / FINAL_CHECKPOINT
        )
        if section.get("cold_start"):
            params = init_parameters(model_config(config), config["model"]["init_seed"])
        else:
            if not Path(init_path).exists():
                raise MissingCheckpoint(
                    f"no checkpoint at {init_path}; run the first phase or pass cold_start"
                )
            params = load_checkpoint(init_path).params
        state = OptimizerState.initial(params)
        start = 0
    else:
        params = init_parameters(model_config(config), config["model"]["init_seed"])
        state = OptimizerState.initial(params)
        start = 0

    log_path = out_dir / "train_log.txt"
    log = open(log_path, "a", encoding="ascii")
    try:
        for step in range(start, tc.steps):
            rng = np.random.default_rng([tc.seed, step])
            t0 = time.perf_counter()
            if phase == "pretrain":
                pool = [r.scans["clean"] for r in records]
                picked = rng.choice(len(pool), size=tc.batch_size, replace=tc.batch_size > len(pool))
                batch = [pool[i] for i in picked]
                params, state, stats = pretrain_step(params, state, batch, rng, tc)
            else:
                picked = rng.choice(
                    len(records), size=tc.batch_size, replace=tc.batch_size > len(records)
                )
                batch = [records[i] for i in picked]
                params, state, stats = finetune_step(params, state, batch, rng, tc)
            wall = time.perf_counter() - t0
            log.write(
                f"step={step + 1} phase={phase} loss={stats.loss:.6e} "
                f"masked={stats.masked_loss:.6e} unmasked={stats.unmasked_loss:.6e} "
                f"wall={wall:.3f}\n"
            )
            if (step + 1) % section["checkpoint_every"] == 0 and (step + 1) < tc.steps:
                save_checkpoint(
                    out_dir / f"model_step{step + 1:06d}.ckpt",
                    params,
                    phase=phase,
                    seed=tc.seed,
                    step=step + 1,
                    optimizer=state.momentum,
                )
    finally:
        log.close()
    final = save_checkpoint(
        out_dir / FINAL_CHECKPOINT,
        params,
        phase=phase,
        seed=tc.seed,
        step=tc.steps,
        optimizer=state.momentum,
    )
    print(f"{phase} finished at step {tc.steps} -> {final}")
    return final


def cmd_pretrain(config: dict) -> None:
    _run_training(config, "pretrain")


def cmd_finetune(config: dict) -> None:
    _run_training(config, "finetune")


def _load_model(config: dict):
    explicit = config["inference"].get("checkpoint")
    path = Path(explicit) if explicit else Path(config["finetune"]["dir"]) / FINAL_CHECKPOINT
    if not path.exists():
        raise MissingCheckpoint(f"no checkpoint at {path}")
    return load_checkpoint(path)


def cmd_correct(config: dict, input_path: str, output_path: str, resample: bool = False) -> None:
    ckpt = _load_model(config)
    cfg = inference_config(config)
    vol = load_scan(input_path)
    side = ckpt.params.config.side
    if vol.dims != (side, side, side):
        if not resample:
            raise ShapeMismatch(
                f"input dims {vol.dims} do not match model side {side}; pass --resample"
            )
        vol = resample_volume(vol, (side, side, side))
    corrected = correct_scan(vol, ckpt.params, cfg)
    out = Path(output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.name.endswith((".nii", ".nii.gz")):
        save_nifti(corrected, out)
    else:
        save_volume(corrected, out)
    print(f"keep_prob={cfg.keep_prob} passes={cfg.passes} seed={cfg.seed}")
    print(f"corrected scan -> {out}")


def _segment(vol: Volume) -> LabelVolume:
    """Threshold segmentation at the midpoints between the default tissue
    bands; a stand-in for a learned segmenter at desk scale."""
    bands = forge.DEFAULT_BANDS
    cuts = [
        bands["csf"][0] / 2.0,
        (bands["csf"][1] + bands["gray"][0]) / 2.0,
        (bands["gray"][1] + bands["white"][0]) / 2.0,
    ]
    return LabelVolume(np.digitize(vol.data, cuts).astype(np.int32), vol.spacing)


def _metric_row(
    subject: str, severity: str, method: str, scan: Volume, clean: Volume,
    labels: LabelVolume | None, peak: float, ssim_cfg: metrics.SsimConfig,
) -> dict:
    row: dict[str, Any] = {
        "record": "scan",
        "subject": subject,
        "severity": severity,
        "method": method,
        "psnr": metrics.psnr(scan, clean, peak),
        "ssim": metrics.ssim(scan, clean, ssim_cfg),
    }
    if labels is not None:
        fg = labels.labels > 0
        bg = labels.labels == 0
        gray = labels.labels == forge.CLASS_IDS["gray"]
        white = labels.labels == forge.CLASS_IDS["white"]
        row["snr"] = metrics.snr(scan, fg, bg)
        row["cnr"] = metrics.cnr(scan, gray, white)
        row["dice_vs_clean_seg"] = metrics.dice(_segment(clean), _segment(scan)).mean
    return row


def cmd_evaluate(config: dict) -> None:
    eval_cfg = config["eval"]
    out_dir = Path(eval_cfg["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_echo(config, out_dir)
    ckpt = _load_model(config)
    base_inference = inference_config(config)
    records = _load_split(config, "test")
    severities = sorted(config["data"]["severities"])
    ssim_cfg = metrics.SsimConfig(
        window_side=eval_cfg["ssim_window"], sigma=eval_cfg["ssim_sigma"]
    )

    rows: list[dict] = []
    scan_index = 0
    for record in sorted(records, key=lambda r: r.subject_id):
        clean = record.scans["clean"]
        peak = float(eval_cfg["peak"]) if eval_cfg["peak"] else float(clean.data.max())
        seg_clean = _segment(clean)
        for severity in severities:
            if severity not in record.scans:
                continue
            scan_index += 1
            affected = record.scans[severity]
            cfg = InferenceConfig(
                keep_prob=base_inference.keep_prob,
                passes=base_inference.passes,
                seed=base_inference.seed ^ (scan_index << 8),
                block_side=base_inference.block_side,
            )
            corrected = correct_scan(affected, ckpt.params, cfg)

            row_a = _metric_row(
                record.subject_id, severity, "affected", affected, clean,
                record.labels, peak, ssim_cfg,
            )
            row_c = _metric_row(
                record.subject_id, severity, "corrected", corrected, clean,
                record.labels, peak, ssim_cfg,
            )
            row_c["dice_improvement"] = metrics.dice_improvement(
                seg_clean, _segment(affected), _segment(corrected)
            )
            rows.extend([row_a, row_c])

            # difference maps, normalized as one group per scan
            diff_c = np.abs(corrected.data - clean.data)
            diff_a = np.abs(affected.data - clean.data)
            group_max = max(float(diff_c.max()), float(diff_a.max()), 1e-12)
            stem = f"{record.subject_id}_{severity}"
            save_volume(Volume(diff_a / group_max), out_dir / f"{stem}_diff_affected.mvol")
            save_volume(Volume(diff_c / group_max), out_dir / f"{stem}_diff_corrected.mvol")
            save_volume(corrected, out_dir / f"{stem}_corrected.mvol")

    for method in ("affected", "corrected"):
        subset = [r for r in rows if r["method"] == method]
        aggregate: dict[str, Any] = {"record": "aggregate", "method": method, "scans": len(subset)}
        for key in ("psnr", "ssim", "snr", "cnr", "dice_improvement"):
            values = [r[key] for r in subset if key in r and r[key] is not None]
            values = [v for v in values if not math.isinf(v)]
            if values:
                aggregate[f"{key}_mean"] = float(np.mean(values))
                aggregate[f"{key}_std"] = float(np.std(values))
        rows.append(aggregate)

    report = out_dir / "report.jsonl"
    report.write_text("\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n")
    print(f"evaluated {scan_index} scans -> {report}")


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mamoc", description="masked motion correction pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "pretrain", "finetune", "correct", "evaluate"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override one config entry",
        )
        if name == "correct":
            p.add_argument("input", help="scan to correct (MVOL1 or NIfTI-1)")
            p.add_argument("output", help="output path (.mvol, .nii or .nii.gz)")
            p.add_argument(
                "--resample",
                action="store_true",
                help="resample inputs whose dims do not match the model",
            )
    return parser


_CONFIG_ERRORS = (
    ConfigError,
    BadConfig,
    BadSpec,
    BadSeverity,
    BadProbability,
    BadEpsilon,
    DegenerateFraction,
    MissingCheckpoint,
)
_IO_ERRORS = (IoFailure, ManifestError)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args.config, args.set)
        if args.command == "simulate":
            cmd_simulate(config)
        elif args.command == "pretrain":
            cmd_pretrain(config)
        elif args.command == "finetune":
            cmd_finetune(config)
        elif args.command == "correct":
            cmd_correct(config, args.input, args.output, resample=args.resample)
        elif args.command == "evaluate":
            cmd_evaluate(config)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _IO_ERRORS as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except MamocError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
