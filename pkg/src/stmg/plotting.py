"""Figure emission: speed-accuracy scatter and mask/distortion panels."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image


def plot_tradeoff(run_dirs: list[Path], out_path: Path) -> Path:
    """One scatter point per run (mean FLOPs % of full vs mIoU), labeled by policy."""
    points = []
    for run in run_dirs:
        summary_path = Path(run) / "summary.json"
        if not summary_path.exists():
            raise FileNotFoundError(f"no summary.json in {run}")
        summary = json.loads(summary_path.read_text())
        label = summary.get("policy", Path(run).name)
        if summary.get("dbb_bias"):
            label += "+dbb"
        points.append((label, 100.0 * summary["flops_ratio"], summary["miou"]))
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, flops_pct, miou in points:
        ax.scatter(flops_pct, miou, s=60)
        ax.annotate(label, (flops_pct, miou), textcoords="offset points", xytext=(6, 4), fontsize=8)
    ax.set_xlabel("mean FLOPs (% of full network)")
    ax.set_ylabel("mIoU")
    ax.set_title("speed-accuracy trade-off")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_mask_panels(eval_dir: Path, out_path: Path, max_rows: int = 4) -> Path:
    """Side-by-side panels: input frame, predicted spatial mask, oracle distortion."""
    eval_dir = Path(eval_dir)
    mask_paths = sorted((eval_dir / "masks").glob("*.png"))[:max_rows]
    if not mask_paths:
        raise FileNotFoundError(f"no mask dumps under {eval_dir / 'masks'}")
    rows = len(mask_paths)
    fig, axes = plt.subplots(rows, 3, figsize=(7.5, 2.2 * rows), squeeze=False)
    for r, mask_path in enumerate(mask_paths):
        stem = mask_path.stem.replace("_mask", "")
        frame_path = eval_dir / "inputs" / f"{stem}.png"
        oracle_path = eval_dir / "distortion" / f"{stem}_oracle.png"
        panels = [
            (frame_path, "frame", None),
            (mask_path, "spatial mask", "gray"),
            (oracle_path, "oracle distortion", "gray"),
        ]
        for c, (path, title, cmap) in enumerate(panels):
            ax = axes[r][c]
            if path.exists():
                ax.imshow(np.asarray(Image.open(path)), cmap=cmap, vmin=0, vmax=255)
            if r == 0:
                ax.set_title(title, fontsize=9)
            ax.set_ylabel(stem, fontsize=7) if c == 0 else None
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
