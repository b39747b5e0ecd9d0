"""Manifests, PNG images and masks, checkpoints and score tables."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .types import ImagePair

MASK_BACKGROUND = 0
MASK_OUT_OF_ROI = 128
MASK_CHANGE = 255
RECORD_FIELDS = ("id", "path_a", "path_b", "y", "gt_mask_path", "roi_path", "unary_path")


@dataclass(frozen=True)
class Record:
    id: str
    path_a: Path
    path_b: Path
    y: int | None = None
    gt_mask_path: Path | None = None
    roi_path: Path | None = None
    unary_path: Path | None = None

    def to_json(self, base: Path) -> dict:
        out = {"id": self.id}
        for name in RECORD_FIELDS[1:]:
            value = getattr(self, name)
            if value is None:
                continue
            if isinstance(value, Path):
                value = _relative(value, base)
            out[name] = value
        return out


def _relative(path: Path, base: Path) -> str:
    try:
        return path.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(path)


def read_manifest(path: str | Path) -> list[Record]:
    """Parse a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            unknown = set(raw) - set(RECORD_FIELDS)
            if unknown:
                raise ValueError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            for key in ("id", "path_a", "path_b"):
                if key not in raw:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            rid = str(raw["id"])
            if rid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            y = raw.get("y")
            if y is not None and y not in (0, 1):
                raise ValueError(f"{path}:{lineno}: y must be 0 or 1")
            opt = {k: base / raw[k] for k in ("gt_mask_path", "roi_path", "unary_path") if raw.get(k)}
            records.append(Record(rid, base / raw["path_a"], base / raw["path_b"], y, **opt))
    return records


def write_manifest(path: str | Path, records: list[Record]) -> None:
    path = Path(path)
    lines = [json.dumps(r.to_json(path.parent), sort_keys=True) for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] or uint8 image as PNG."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def load_pair(record: Record) -> ImagePair:
    return ImagePair.from_uint8(read_image(record.path_a), read_image(record.path_b), record.id)


def read_mask(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Return (labels, roi) from a 0/128/255 mask PNG."""
    with Image.open(path) as img:
        raw = np.asarray(img.convert("L"))
    bad = ~np.isin(raw, (MASK_BACKGROUND, MASK_OUT_OF_ROI, MASK_CHANGE))
    if bad.any():
        raise ValueError(f"mask {path} holds values other than 0, 128 and 255")
    return (raw == MASK_CHANGE).astype(np.uint8), raw != MASK_OUT_OF_ROI


def read_roi(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 0


def write_mask(path: str | Path, labels: np.ndarray, roi: np.ndarray | None = None) -> None:
    labels = np.asarray(labels)
    out = np.where(labels == 1, MASK_CHANGE, MASK_BACKGROUND).astype(np.uint8)
    if roi is not None:
        out[~np.asarray(roi, dtype=bool)] = MASK_OUT_OF_ROI
    Image.fromarray(out, mode="L").save(path, format="PNG")


def write_json(path: str | Path, data: dict) -> None:
    text = json.dumps(data, sort_keys=True, indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_table(path: str | Path, header: list[str], rows: list[list]) -> None:
    """Comma-separated table with a header row; floats printed with repr precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
