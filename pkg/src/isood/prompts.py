"""Style-template prompt collection: rendering, shift measurement, and the
hand-off manifest for an external image generator.

The style templates ship as a data file (one prompt + negative prompt per
style, each with a single ``{object}`` placeholder); the code treats them as
data. Prompt shift against the ID image corpus reuses the exact shift
machinery -- prompt text features as the test side, ID image features as the
base -- and the derived intervals absorb the constant cross-modal offset.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .decomposition import PLACEHOLDER, DecompositionMatrix, render_text
from .errors import StoreIOError, ValidationError
from .shift import DEFAULT_K, ShiftDegrees, SubsetIndex, measure_shifts
from .store import EmbeddingStore

DEFAULT_PER_SUBSET_TARGET = 5000

# Word list for the prompt safety filter; callers can extend or replace it.
DEFAULT_BANNED_TERMS = (
    "gore", "blood", "corpse", "torture", "mutilation", "violence", "weapon",
    "nsfw", "nude", "naked", "explicit", "sexual", "erotic",
)


@dataclass
class StyleTemplate:
    name: str
    prompt_template: str
    negative_prompt: str

    def validate(self) -> None:
        if self.prompt_template.count(PLACEHOLDER) != 1:
            raise ValidationError(
                f"style {self.name!r}: template must contain exactly one "
                f"{PLACEHOLDER} placeholder"
            )


@dataclass
class PromptRecord:
    label: str
    style_name: str
    rendered_prompt: str
    negative_prompt: str


def load_styles(path: Optional[str | os.PathLike] = None) -> list[StyleTemplate]:
    """Load style templates from a JSON array of {name, prompt,
    negative_prompt}; defaults to the bundled collection."""
    if path is None:
        text = resources.files("isood.data").joinpath("sdxl_styles.json").read_text()
    else:
        path = Path(path)
        if not path.exists():
            raise StoreIOError(f"no such style file: {path}")
        text = path.read_text()
    styles = [
        StyleTemplate(
            name=obj["name"],
            prompt_template=obj["prompt"],
            negative_prompt=obj.get("negative_prompt", ""),
        )
        for obj in json.loads(text)
    ]
    names = [s.name for s in styles]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate style names in style file")
    for s in styles:
        s.validate()
    return styles


def render_prompts(styles: Sequence[StyleTemplate], labels: Sequence[str]) -> list[PromptRecord]:
    """All style-by-label renderings, style-major order."""
    if not styles or not labels:
        raise ValidationError("styles and labels must be non-empty")
    records = []
    for style in styles:
        style.validate()
        for label in labels:
            records.append(
                PromptRecord(
                    label=label,
                    style_name=style.name,
                    rendered_prompt=render_text(style.prompt_template, label),
                    negative_prompt=style.negative_prompt,
                )
            )
    return records


def validate_prompt_records(records: Sequence[PromptRecord]) -> list[str]:
    """Non-fatal suspicious-record report (currently: empty labels)."""
    warnings = []
    for rec in records:
        if not rec.label.strip():
            warnings.append(
                f"style {rec.style_name!r}: rendered with an empty object label"
            )
    return warnings


def write_prompts(records: Sequence[PromptRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(
                json.dumps(
                    {
                        "label": rec.label,
                        "style_name": rec.style_name,
                        "rendered_prompt": rec.rendered_prompt,
                        "negative_prompt": rec.negative_prompt,
                    },
                    sort_keys=True,
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_prompts(path: str | os.PathLike) -> list[PromptRecord]:
    path = Path(path)
    if not path.exists():
        raise StoreIOError(f"no such prompt file: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                obj = json.loads(line)
                records.append(
                    PromptRecord(
                        label=obj["label"],
                        style_name=obj["style_name"],
                        rendered_prompt=obj["rendered_prompt"],
                        negative_prompt=obj["negative_prompt"],
                    )
                )
    return records


def measure_prompt_shift(
    prompt_text_features: EmbeddingStore,
    id_image_features: EmbeddingStore,
    dm: DecompositionMatrix,
    k: int = DEFAULT_K,
) -> ShiftDegrees:
    """Shift degrees of rendered prompts (by their text features) against the
    ID image corpus; store ids must be the rendered prompt strings."""
    return measure_shifts(prompt_text_features, id_image_features, dm, k)


def export_generation_manifest(
    index: SubsetIndex,
    prompts: Sequence[PromptRecord],
    per_subset_target: int = DEFAULT_PER_SUBSET_TARGET,
    banned_terms: Sequence[str] = DEFAULT_BANNED_TERMS,
    seed: int = 0,
) -> dict:
    """Per-cell prompt lists plus image-count targets for the external
    generator, with a banned-term filter report.

    N/A cells get target 0 and no prompts. When a cell holds more prompts
    than its target, a uniform sample of ``per_subset_target`` prompts is
    taken with the recorded seed.
    """
    if per_subset_target < 0:
        raise ValidationError("per_subset_target must be >= 0")
    by_rendered = {rec.rendered_prompt: rec for rec in prompts}
    banned_lower = [term.lower() for term in banned_terms]
    rng = np.random.default_rng(seed)

    filter_report = []

    def keep(rec: PromptRecord) -> bool:
        text = rec.rendered_prompt.lower()
        for term in banned_lower:
            if term in text:
                filter_report.append(
                    {
                        "rendered_prompt": rec.rendered_prompt,
                        "style_name": rec.style_name,
                        "term": term,
                    }
                )
                return False
        return True

    n = index.n_levels
    cells = []
    for ls in range(1, n + 1):
        for lc in range(1, n + 1):
            na = bool(index.na_mask[ls - 1, lc - 1])
            cell_ids = index.cell(ls, lc)
            if na:
                cells.append({"level_sem": ls, "level_cov": lc, "target": 0, "prompts": []})
                continue
            records = []
            for prompt_id in cell_ids:
                rec = by_rendered.get(prompt_id)
                if rec is None:
                    raise ValidationError(
                        f"subset cell ({ls},{lc}) references unknown prompt {prompt_id!r}"
                    )
                if keep(rec):
                    records.append(rec)
            if per_subset_target > 0 and not records:
                raise ValidationError(
                    f"cell ({ls},{lc}) has target {per_subset_target} but no usable prompts"
                )
            if len(records) > per_subset_target:
                chosen = rng.choice(len(records), size=per_subset_target, replace=False)
                records = [records[i] for i in sorted(chosen)]
            cells.append(
                {
                    "level_sem": ls,
                    "level_cov": lc,
                    "target": per_subset_target,
                    "prompts": [
                        {"prompt": r.rendered_prompt, "negative_prompt": r.negative_prompt}
                        for r in records
                    ],
                }
            )
    return {
        "per_subset_target": per_subset_target,
        "seed": seed,
        "cells": cells,
        "filter_report": filter_report,
    }


def write_generation_manifest(manifest: dict, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(manifest, sort_keys=True, ensure_ascii=False) + "\n")
