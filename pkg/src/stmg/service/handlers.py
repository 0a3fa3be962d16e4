"""Service-layer command implementations shared by the HTTP app and the CLI."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from ..checkpoint import load_checkpoint
from ..config import ConfigError
from ..pipeline import PolicySpec, run_stream, simulate_schedule
from ..plotting import plot_mask_panels, plot_tradeoff
from ..synthdata import generate_sequence, oracle_distortion_map, save_sequence
from ..training import train as run_training
from . import schemas

OUTPUT_ROOT_ENV = "STMG_OUTPUT_ROOT"


def resolve_out(path: str | Path) -> Path:
    """Resolve a run output path against the configured output root."""
    p = Path(path)
    if p.is_absolute():
        return p
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return (Path(root) / p) if root else p


def gendata(req: schemas.GendataRequest) -> schemas.GendataResponse:
    cfg = req.config
    seq = generate_sequence(
        cfg.seed,
        cfg.num_frames,
        cfg.num_objects,
        cfg.speed,
        height=cfg.height,
        width=cfg.width,
        num_classes=cfg.num_classes,
        channels=cfg.channels,
    )
    out = resolve_out(req.out_dir)
    save_sequence(seq, out)
    return schemas.GendataResponse(
        dataset_dir=str(out),
        manifest_path=str(out / "manifest.json"),
        num_frames=len(seq),
    )


def train(req: schemas.TrainRequest) -> schemas.TrainResponse:
    config = req.config
    out = resolve_out(req.out_dir or config.output_dir or f"runs/train-{config.config_hash()[:8]}")
    result = run_training(config, out)
    return schemas.TrainResponse(
        run_dir=str(out),
        checkpoint_path=str(result.checkpoint_path),
        metrics_path=str(result.metrics_path),
        config_path=str(result.config_path),
        steps=result.steps,
        final_loss=result.final_loss,
        final_mean_keep_prob=result.final_mean_keep_prob,
    )


def _dump_gray(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path)


def evaluate(req: schemas.EvalRequest) -> schemas.EvalResponse:
    loaded = load_checkpoint(resolve_out(req.checkpoint))
    config = loaded.config
    if req.config_check_hash is not None and req.config_check_hash != loaded.config_hash:
        raise ConfigError(
            f"supplied config (hash {req.config_check_hash[:12]}) does not match "
            f"checkpoint config (hash {loaded.config_hash[:12]})"
        )
    policy_settings = req.policy or config.policy
    agg = req.aggregation or config.aggregation
    dbb = config.maskgen.dbb_bias if req.dbb_bias is None else req.dbb_bias
    eval_seed = config.eval.seed if req.eval_seed is None else req.eval_seed
    num_frames = req.num_frames or config.eval.num_frames
    dump_masks = config.eval.dump_masks if req.dump_masks is None else req.dump_masks

    ds = config.dataset
    seq = generate_sequence(
        eval_seed,
        num_frames,
        ds.num_objects,
        ds.speed,
        height=ds.height,
        width=ds.width,
        num_classes=ds.num_classes,
        channels=ds.channels,
    )
    policy = PolicySpec(
        kind=policy_settings.kind,
        gamma1=policy_settings.gamma1,
        gamma2=policy_settings.gamma2,
        refresh_period=policy_settings.refresh_period,
    )
    result = run_stream(
        seq,
        loaded.backbone,
        loaded.maskgen,
        policy,
        agg_mode=agg.mode,
        fixed_value=agg.fixed_value,
        dbb_bias=dbb,
        random_seed=config.eval.random_agg_seed,
    )

    out = resolve_out(req.out_dir or f"runs/eval-{policy.kind}-{eval_seed}")
    out.mkdir(parents=True, exist_ok=True)
    frames_log = out / "frames.jsonl"
    with frames_log.open("w") as fh:
        for fr in result.frames:
            fh.write(json.dumps(fr.to_record()) + "\n")
    summary = dict(result.summary)
    summary["eval_seed"] = eval_seed
    summary["checkpoint"] = str(req.checkpoint)
    summary["config_hash"] = loaded.config_hash
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    (out / "config.json").write_text(config.to_json())

    if dump_masks:
        stride = config.backbone.feature_stride
        for sub in ("masks", "distortion", "inputs", "predictions"):
            (out / sub).mkdir(exist_ok=True)
        for fr in result.frames:
            stem = f"frame_{fr.index:05d}"
            if fr.spatial_mask is not None:
                _dump_gray(fr.spatial_mask, out / "masks" / f"{stem}_mask.png")
                oracle = oracle_distortion_map(
                    seq.labels[fr.index - 1], seq.labels[fr.index], downsample=stride
                )
                _dump_gray(oracle.astype(np.float64), out / "distortion" / f"{stem}_oracle.png")
                pixels = np.rint(seq.frames[fr.index].pixels * 255.0).astype(np.uint8)
                img = pixels[0] if pixels.shape[0] == 1 else np.transpose(pixels, (1, 2, 0))
                Image.fromarray(img).save(out / "inputs" / f"{stem}.png")
            scale = 255 // max(seq.num_classes - 1, 1)
            Image.fromarray((fr.predicted * scale).astype(np.uint8)).save(
                out / "predictions" / f"{stem}_pred.png"
            )

    return schemas.EvalResponse(
        run_dir=str(out),
        summary_path=str(out / "summary.json"),
        frames_log_path=str(frames_log),
        summary=summary,
    )


def simulate(req: schemas.SimulateRequest) -> schemas.SimulateResponse:
    if any(m < 0 for m in req.magnitudes):
        raise ConfigError("magnitudes must be >= 0")
    trace = simulate_schedule(req.magnitudes, req.gamma1, req.gamma2)
    return schemas.SimulateResponse(trace=[schemas.SimulateStep(**step) for step in trace])


def plot(req: schemas.PlotRequest) -> schemas.PlotResponse:
    out = resolve_out(req.out_dir)
    figures = [str(plot_tradeoff([resolve_out(d) for d in req.run_dirs], out / "tradeoff.png"))]
    panel_src = req.mask_panels_from
    if panel_src is None:
        for d in req.run_dirs:
            if any((resolve_out(d) / "masks").glob("*.png")):
                panel_src = d
                break
    if panel_src is not None:
        figures.append(str(plot_mask_panels(resolve_out(panel_src), out / "mask_panels.png")))
    return schemas.PlotResponse(figures=figures)
