"""Manifest-driven data handling: discovery, validation, decoding, augmentation.

A manifest is a line-delimited JSON file; each record binds an input image
(and, for paired splits, a target image) to a split and source dataset:

    {"input_path": ..., "target_path": ..., "split": "train",
     "source": "UIEB", "repeat_factor": 2}

Train and paired-test records must carry targets, every referenced path must
exist, and no image may appear in both the train split and any test split.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

SPLITS = ("train", "test_paired", "test_unpaired")
SOURCES = ("UIEB", "EUVP-dark", "EUVP-imagenet", "EUVP-scenes", "LSUI", "RUIE", "other")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")

# per-source training counts used by the benchmark assembly; UIEB images are
# duplicated (repeat factor 2) to balance the sample sizes
DEFAULT_PLAN = {
    "UIEB": {"train": 800, "repeat_factor": 2, "test_paired": 90, "test_unpaired": 60},
    "EUVP-dark": {"train": 800},
    "EUVP-imagenet": {"train": 700},
    "EUVP-scenes": {"train": 500, "test_paired": 200, "test_unpaired": 200},
    "LSUI": {"train": 2000, "test_paired": 200},
    "RUIE": {"test_unpaired": 200},
}


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


@dataclass
class ManifestRecord:
    input_path: str
    split: str
    source: str = "other"
    target_path: Optional[str] = None
    repeat_factor: int = 1

    def validate(self, check_paths: bool = True) -> None:
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r} (expected one of {SPLITS})")
        if self.source not in SOURCES:
            raise ManifestError(f"unknown source {self.source!r} (expected one of {SOURCES})")
        if self.repeat_factor < 1:
            raise ManifestError(f"repeat_factor must be >= 1, got {self.repeat_factor}")
        if self.split in ("train", "test_paired") and not self.target_path:
            raise ManifestError(f"{self.split} record {self.input_path} is missing target_path")
        if check_paths:
            if not os.path.exists(self.input_path):
                raise ManifestError(f"missing input image: {self.input_path}")
            if self.target_path and not os.path.exists(self.target_path):
                raise ManifestError(f"missing target image: {self.target_path}")


@dataclass
class Manifest:
    records: List[ManifestRecord] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def split(self, name: str) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def validate(self, check_paths: bool = True, allow_empty: bool = False) -> None:
        if not self.records and not allow_empty:
            raise ManifestError("manifest is empty (pass allow_empty to accept)")
        for record in self.records:
            record.validate(check_paths)
        train = {os.path.realpath(r.input_path) for r in self.split("train")}
        for split_name in ("test_paired", "test_unpaired"):
            for r in self.split(split_name):
                if os.path.realpath(r.input_path) in train:
                    raise ManifestError(
                        f"leakage: {r.input_path} appears in both train and {split_name}"
                    )

    def save(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                rec = {
                    "input_path": r.input_path,
                    "split": r.split,
                    "source": r.source,
                    "repeat_factor": r.repeat_factor,
                }
                if r.target_path:
                    rec["target_path"] = r.target_path
                f.write(json.dumps(rec) + "\n")

    @staticmethod
    def load(path) -> "Manifest":
        records = []
        with open(path) as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ManifestError(f"{path}:{line_no}: not valid JSON ({e})") from e
                records.append(
                    ManifestRecord(
                        input_path=rec["input_path"],
                        split=rec["split"],
                        source=rec.get("source", "other"),
                        target_path=rec.get("target_path"),
                        repeat_factor=int(rec.get("repeat_factor", 1)),
                    )
                )
        return Manifest(records)


def _discover_pairs(root: Path) -> List[Tuple[str, Optional[str]]]:
    """List (input, target) files under a source root.

    Expected layout: ``root/input/*`` with optional matching names under
    ``root/target/*``; a bare directory of images is treated as unpaired.
    """
    input_dir = root / "input"
    target_dir = root / "target"
    if input_dir.is_dir():
        pairs = []
        for p in sorted(input_dir.iterdir()):
            if p.suffix.lower() not in IMAGE_EXTS:
                continue
            target = None
            if target_dir.is_dir():
                for ext in IMAGE_EXTS:
                    cand = target_dir / (p.stem + ext)
                    if cand.exists():
                        target = str(cand)
                        break
            pairs.append((str(p), target))
        return pairs
    return [
        (str(p), None)
        for p in sorted(root.iterdir())
        if p.suffix.lower() in IMAGE_EXTS
    ]


def build_manifest(
    roots: Dict[str, str],
    plan: Optional[dict] = None,
    seed: int = 0,
    allow_empty: bool = False,
) -> Manifest:
    """Assemble a manifest by seeded sampling from per-source image roots.

    ``roots`` maps source names to directories; ``plan`` gives requested
    counts per source and split.  When a source holds fewer images than the
    plan requests, counts are scaled down proportionally and the shortfall is
    flagged in the manifest notes.  Identical seeds yield identical manifests.
    """
    plan = DEFAULT_PLAN if plan is None else plan
    rng = np.random.default_rng(seed)
    manifest = Manifest()
    for source in sorted(plan):
        source_plan = plan[source]
        requested = sum(int(source_plan.get(k, 0)) for k in SPLITS)
        if requested == 0:
            continue
        if source not in roots:
            raise ManifestError(f"no root directory given for source {source!r}")
        root = Path(roots[source])
        if not root.is_dir():
            raise ManifestError(f"root for source {source!r} does not exist: {root}")
        pairs = _discover_pairs(root)
        paired = [p for p in pairs if p[1] is not None]
        needs_pairs = int(source_plan.get("train", 0)) + int(source_plan.get("test_paired", 0))
        pool = paired if needs_pairs else pairs
        if not pool:
            raise ManifestError(f"source {source!r} at {root} holds no usable images")
        scale = 1.0
        if requested > len(pool):
            scale = len(pool) / requested
            manifest.notes.append(
                f"{source}: only {len(pool)} images for {requested} requested; "
                f"counts scaled by {scale:.3f}"
            )
        order = rng.permutation(len(pool))
        cursor = 0
        for split_name in SPLITS:
            want = int(round(int(source_plan.get(split_name, 0)) * scale))
            take = order[cursor : cursor + want]
            cursor += want
            repeat = int(source_plan.get("repeat_factor", 1)) if split_name == "train" else 1
            for idx in take:
                inp, tgt = pool[idx]
                manifest.records.append(
                    ManifestRecord(
                        input_path=inp,
                        target_path=tgt if split_name != "test_unpaired" else None,
                        split=split_name,
                        source=source,
                        repeat_factor=repeat,
                    )
                )
    manifest.validate(check_paths=True, allow_empty=allow_empty)
    return manifest


# --- image io ---

def load_image(path) -> np.ndarray:
    """Decode an 8-bit image file to a float32 HWC array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path, img: np.ndarray) -> None:
    """Write a float HWC array in [0, 1] as 8-bit PNG (round half up)."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    quantized = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(quantized).save(path)


# --- paired augmentation ---

@dataclass
class AugmentConfig:
    crop: int = 256
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rot90_prob: float = 0.5
    transpose_prob: float = 0.5
    scale_range: Tuple[float, float] = (0.8, 1.2)
    enable_scale: bool = True

    @staticmethod
    def identity(crop: int = 256) -> "AugmentConfig":
        return AugmentConfig(
            crop=crop,
            hflip_prob=0.0,
            vflip_prob=0.0,
            rot90_prob=0.0,
            transpose_prob=0.0,
            enable_scale=False,
        )


def _resize(img: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a float HWC array to (height, width)."""
    h, w = size
    if img.shape[:2] == (h, w):
        return np.asarray(img, dtype=np.float32)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    t = t.permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return t.squeeze(0).permute(1, 2, 0).numpy()


def augment(
    inp: np.ndarray,
    target: Optional[np.ndarray],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Apply one random geometric transform chain to an image pair.

    The same resize/crop/flip/rotation/transpose parameters are applied to
    input and target so their pixel alignment is preserved.  Order: resize to
    the working size (scaled when scaling is enabled), upscale if still
    smaller than the crop, random crop, then the pixel-order ops.
    """
    base = cfg.crop
    if cfg.enable_scale:
        lo, hi = cfg.scale_range
        factor = float(rng.uniform(lo, hi))
    else:
        factor = 1.0
    size = max(int(round(base * factor)), 1)
    size = max(size, base)  # never below the crop: upscale-then-crop
    imgs = [inp] + ([target] if target is not None else [])
    imgs = [_resize(im, (size, size)) for im in imgs]

    top = int(rng.integers(0, size - base + 1))
    left = int(rng.integers(0, size - base + 1))
    imgs = [im[top : top + base, left : left + base] for im in imgs]

    if rng.random() < cfg.hflip_prob:
        imgs = [im[:, ::-1] for im in imgs]
    if rng.random() < cfg.vflip_prob:
        imgs = [im[::-1, :] for im in imgs]
    if rng.random() < cfg.rot90_prob:
        k = int(rng.integers(1, 4))
        imgs = [np.rot90(im, k) for im in imgs]
    if rng.random() < cfg.transpose_prob:
        imgs = [im.transpose(1, 0, 2) for im in imgs]
    imgs = [np.ascontiguousarray(im) for im in imgs]
    if target is None:
        return imgs[0], None
    return imgs[0], imgs[1]
