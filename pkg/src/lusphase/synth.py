"""Synthetic lung-ultrasound-like frames for smoke tests and demos.

COVID frames carry bright compact blobs; non-COVID frames carry horizontal
reverberation bands. Both get speckle and depth attenuation. The classes are
easy to separate on purpose: this exercises the pipeline, not clinical skill.

    python -m lusphase.synth OUT_DIR [--subjects 8] [--per-subject 5] [--side 96]
"""
from __future__ import annotations

import argparse
import csv
from pathlib import Path

import numpy as np

from .imgcore import PNG8, save_image

_LABEL_CYCLE = ("covid", "pneumonia", "covid", "regular")


def disc_frame(side: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[:side, :side].astype(np.float64)
    img = np.zeros((side, side))
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.2 * side, 0.8 * side, 2)
        r = rng.uniform(0.05, 0.1) * side
        img += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
    return img


def band_frame(side: int, rng: np.random.Generator) -> np.ndarray:
    yy = np.mgrid[:side, :side][0].astype(np.float64)
    period = rng.uniform(0.12, 0.2) * side
    return 0.5 + 0.5 * np.cos(2 * np.pi * yy / period + rng.uniform(0, 2 * np.pi))


def synthetic_frame(source_label: str, side: int, rng: np.random.Generator) -> np.ndarray:
    base = disc_frame(side, rng) if source_label == "covid" else band_frame(side, rng)
    depth = np.linspace(0.0, 1.0, side)[:, None]
    speckle = rng.rayleigh(0.15, size=(side, side))
    img = base * np.exp(-0.6 * depth) + speckle
    return np.clip(img / img.max(), 0.0, 1.0)


def make_synthetic_dataset(out_dir, n_subjects: int = 8, per_subject: int = 5, side: int = 96,
                           seed: int = 0) -> Path:
    """Write PNG frames plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "image_path", "subject_id", "source_label"])
        for s in range(n_subjects):
            label = _LABEL_CYCLE[s % len(_LABEL_CYCLE)]
            for i in range(per_subject):
                sid = f"s{s:02d}_f{i:02d}"
                rel = f"frames/{sid}.png"
                save_image(synthetic_frame(label, side, rng), out_dir / rel, PNG8)
                w.writerow([sid, rel, f"subj{s:02d}", label])
    return manifest


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="Generate a synthetic frame set with a manifest.")
    ap.add_argument("out_dir")
    ap.add_argument("--subjects", type=int, default=8)
    ap.add_argument("--per-subject", type=int, default=5)
    ap.add_argument("--side", type=int, default=96)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    print(make_synthetic_dataset(args.out_dir, args.subjects, args.per_subject, args.side, args.seed))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
