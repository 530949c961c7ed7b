"""Robustness benchmark: embed -> attack -> extract over a corpus.

The comparison mode additionally embeds after a simulated export
(one quality-90 JPEG pass) to contrast in-loop protection with post-hoc
stamping on the same images and keys.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import integrator, lexicon
from .attacks import NOISE_GENERATOR, AttackSpec, jpeg_roundtrip
from .errors import AtelierError
from .generator import GeneratorParams, generate
from .image import Image, content_hash
from .planner import LayoutConstraint, Subtask, SubtaskPlan
from .protector import CropWindow, WatermarkKey, derive_key, embed, extract

POSTHOC_EXPORT_QUALITY = 90
BENCH_TIMESTAMP = datetime(2026, 1, 1, tzinfo=timezone.utc)


def standard_grid(noise_seed: int = 0) -> list[AttackSpec]:
    """JPEG 50-95, sigma 0.01-0.05, crop 10-30%, resize 50-200%."""
    return [
        AttackSpec(kind="jpeg", quality=50),
        AttackSpec(kind="jpeg", quality=70),
        AttackSpec(kind="jpeg", quality=95),
        AttackSpec(kind="gaussian_noise", sigma=0.01, seed=noise_seed),
        AttackSpec(kind="gaussian_noise", sigma=0.03, seed=noise_seed),
        AttackSpec(kind="gaussian_noise", sigma=0.05, seed=noise_seed),
        AttackSpec(kind="crop", fraction=0.10),
        AttackSpec(kind="crop", fraction=0.25),
        AttackSpec(kind="crop", fraction=0.30),
        AttackSpec(kind="resize", factor=0.5),
        AttackSpec(kind="resize", factor=2.0),
    ]


def make_corpus(count: int, size: int = 256, seed: int = 0) -> list[Image]:
    """Deterministic procedural scenes: gradient background plus two or
    three composited glyphs at spread-out grid cells."""
    rng = np.random.default_rng(seed)
    palettes = list(lexicon.BACKGROUND_PALETTES)
    images: list[Image] = []
    params = GeneratorParams(resolution=max(64, size // 2))
    for i in range(count):
        n_fg = int(rng.integers(2, 4))
        entities = rng.choice(len(lexicon.ENTITIES), size=n_fg, replace=False)
        cells = rng.choice(len(lexicon.GRID_CELLS), size=n_fg, replace=False)
        subtasks = []
        for j in range(n_fg):
            color = lexicon.COLOR_NAMES[int(rng.integers(0, len(lexicon.COLOR_NAMES)))]
            subtasks.append(
                Subtask(
                    id=j,
                    entity=lexicon.ENTITIES[int(entities[j])],
                    attributes={"color": color},
                    layout=LayoutConstraint(
                        anchor=lexicon.GRID_CELLS[int(cells[j])], depth=j + 1
                    ),
                )
            )
        subtasks.append(
            Subtask(
                id=n_fg,
                entity=lexicon.BACKGROUND_ENTITY,
                attributes={"palette": palettes[i % len(palettes)]},
                layout=LayoutConstraint(depth=0),
                kind="background",
            )
        )
        plan = SubtaskPlan(subtasks=tuple(subtasks), coverage=1.0)
        layout = integrator.resolve_layout(plan, size)
        components = [
            generate(s, int(rng.integers(0, 2**32)), params) for s in plan.subtasks
        ]
        scene = integrator.composite(components, layout, size)
        images.append(scene.to_image())
    return images


def corpus_keys(
    corpus: list[Image],
    salt: str,
    amplitude: float | None = None,
    chips_per_bit: int | None = None,
) -> list[WatermarkKey]:
    keys = []
    for img in corpus:
        kwargs = {} if amplitude is None else {"amplitude": amplitude}
        keys.append(
            derive_key(
                content_hash(img),
                BENCH_TIMESTAMP,
                salt,
                img.width,
                img.height,
                chips_per_bit=chips_per_bit,
                **kwargs,
            )
        )
    return keys


@dataclass
class BenchCell:
    mode: str
    attack: str
    param: float
    corpus_n: int
    recovery_rate: float
    mean_bit_accuracy: float
    error: str | None = None

    def to_json(self) -> dict:
        out = {
            "mode": self.mode,
            "attack": self.attack,
            "param": self.param,
            "corpus_n": self.corpus_n,
            "recovery_rate": self.recovery_rate,
            "mean_bit_accuracy": self.mean_bit_accuracy,
        }
        if self.error:
            out["error"] = self.error
        return out


@dataclass
class RobustnessReport:
    cells: list[BenchCell]
    corpus_digest: str
    config: dict = field(default_factory=dict)

    def cell(self, attack_label: str, mode: str = "integrated") -> BenchCell:
        for cell in self.cells:
            if cell.attack == attack_label and cell.mode == mode:
                return cell
        raise KeyError(f"no cell {attack_label!r} for mode {mode!r}")

    def to_json(self) -> dict:
        return {
            "corpus_digest": self.corpus_digest,
            "config": self.config,
            "cells": [c.to_json() for c in self.cells],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["attack", "param", "corpus_n", "recovery_rate", "mean_bit_accuracy", "mode"]
        )
        for c in self.cells:
            writer.writerow(
                [c.attack, c.param, c.corpus_n, f"{c.recovery_rate:.4f}",
                 f"{c.mean_bit_accuracy:.6f}", c.mode]
            )
        return buf.getvalue()


def _corpus_digest(corpus: list[Image]) -> str:
    acc = hashlib.sha256()
    for img in corpus:
        acc.update(content_hash(img))
    return acc.hexdigest()


def run_bench(
    corpus: list[Image],
    keys: list[WatermarkKey],
    grid: list[AttackSpec],
    compare_posthoc: bool = False,
) -> RobustnessReport:
    """For each (image, attack): embed, attack, blind-extract; aggregate
    recovery rate and mean bit accuracy per attack. Per-cell failures are
    recorded in the report instead of aborting the run."""
    if len(corpus) != len(keys) or not corpus:
        raise ValueError("corpus and keys must be non-empty and parallel")
    modes = ["integrated"] + (["posthoc"] if compare_posthoc else [])
    carriers: dict[str, list[Image]] = {"integrated": corpus}
    if compare_posthoc:
        carriers["posthoc"] = [
            jpeg_roundtrip(img, POSTHOC_EXPORT_QUALITY) for img in corpus
        ]
    cells: list[BenchCell] = []
    for mode in modes:
        watermarked = [embed(img, key) for img, key in zip(carriers[mode], keys)]
        for spec in grid:
            accuracies: list[float] = []
            recoveries: list[bool] = []
            error: str | None = None
            try:
                for idx, (marked, key) in enumerate(zip(watermarked, keys)):
                    attacked, offset = spec.apply(marked, seed_offset=idx)
                    window = CropWindow(*offset) if offset is not None else None
                    result = extract(attacked, key, window=window)
                    accuracies.append(result.bit_accuracy)
                    recoveries.append(result.recovered)
            except AtelierError as exc:
                error = f"{type(exc).__name__}: {exc}"
            cells.append(
                BenchCell(
                    mode=mode,
                    attack=spec.label,
                    param=float(spec.param),
                    corpus_n=len(accuracies),
                    recovery_rate=float(np.mean(recoveries)) if recoveries else 0.0,
                    mean_bit_accuracy=float(np.mean(accuracies)) if accuracies else 0.0,
                    error=error,
                )
            )
    config = {
        "noise_generator": NOISE_GENERATOR,
        "resample_kernel": "bilinear",
        "grid": [spec.to_json() for spec in grid],
        "amplitude": keys[0].amplitude,
        "chips_per_bit": keys[0].chips_per_bit,
        "posthoc_export_quality": POSTHOC_EXPORT_QUALITY if compare_posthoc else None,
    }
    return RobustnessReport(
        cells=cells, corpus_digest=_corpus_digest(corpus), config=config
    )


def write_report(report: RobustnessReport, csv_path=None, json_path=None) -> None:
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(report.to_csv())
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
