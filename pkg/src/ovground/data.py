"""Dataset manifests, validation, disjointness auditing, and synthetic scenes.

The canonical on-disk format is one JSON object per manifest file::

    {"split": "...", "registry": {"base": [...], "novel": [...]}, "samples": [...]}

Grounding records carry ``image_id, width, height, expression,
bbox=[x1,y1,x2,y2], category, is_novel``.  Phrase-localization records carry
``image_id, sentence, uses_novel, chunks=[{start,end,chain}], chains={id:
[[x1,y1,x2,y2], ...]}``.  Boxes are pixel corners.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ovground.boxes import BBox
from ovground.config import ModelConfig
from ovground.errors import InputError, ManifestError
from ovground.samples import GroundingSample, PhraseChunk, PLSample

BASE_SHAPES = ("square", "circle")
NOVEL_SHAPES = ("rectangle", "ellipse")
COLOR_TABLE = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 90, 230),
    "yellow": (230, 220, 50),
    "cyan": (60, 210, 210),
    "magenta": (210, 60, 210),
    "orange": (240, 150, 40),
    "white": (235, 235, 235),
}
BACKGROUND = (26, 26, 26)


@dataclass(frozen=True)
class CategoryRegistry:
    base: tuple[str, ...]
    novel: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"base": list(self.base), "novel": list(self.novel)}


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    registry: CategoryRegistry
    samples: tuple

    @property
    def kind(self) -> str:
        if self.samples and isinstance(self.samples[0], PLSample):
            return "pl"
        return "vg"

    @property
    def image_ids(self) -> tuple[str, ...]:
        return tuple(s.image_id for s in self.samples)


@dataclass(frozen=True)
class DisjointnessReport:
    """Image-id and base/novel category overlaps between two manifests."""

    shared_image_ids: tuple[str, ...]
    category_overlaps: tuple[str, ...]

    @property
    def passed(self) -> bool:
        return not self.shared_image_ids and not self.category_overlaps

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "shared_image_ids": list(self.shared_image_ids),
            "category_overlaps": list(self.category_overlaps),
        }


# ---------------------------------------------------------------------------
# loading / saving


def _read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest root must be a JSON object")
    return doc


def _parse_registry(doc: dict, problems: list) -> CategoryRegistry:
    registry = doc.get("registry")
    if not isinstance(registry, dict):
        problems.append("registry: missing or not an object")
        return CategoryRegistry((), ())
    base = registry.get("base", [])
    novel = registry.get("novel", [])
    for name, cats in (("base", base), ("novel", novel)):
        if not isinstance(cats, list) or not all(isinstance(c, str) for c in cats):
            problems.append(f"registry.{name}: must be a list of strings")
    return CategoryRegistry(tuple(base), tuple(novel))


def _parse_box(raw, where: str, problems: list) -> BBox | None:
    if (
        not isinstance(raw, (list, tuple))
        or len(raw) != 4
        or not all(isinstance(v, (int, float)) for v in raw)
    ):
        problems.append(f"{where}: bbox must be [x1, y1, x2, y2] numbers, got {raw!r}")
        return None
    try:
        return BBox(*[float(v) for v in raw])
    except InputError as exc:
        problems.append(f"{where}: {exc}")
        return None


_VG_KEYS = {
    "image_id": str,
    "width": int,
    "height": int,
    "expression": str,
    "category": str,
    "is_novel": bool,
}


def load_vg_manifest(path) -> DatasetManifest:
    """Load and validate a grounding manifest; raises ManifestError listing
    every offending record and field."""
    doc = _read_json(path)
    problems: list[str] = []
    registry = _parse_registry(doc, problems)
    split = doc.get("split")
    if not isinstance(split, str) or not split:
        problems.append("split: missing or empty")
        split = ""
    raw_samples = doc.get("samples")
    if not isinstance(raw_samples, list):
        problems.append("samples: missing or not a list")
        raw_samples = []

    known = set(registry.base) | set(registry.novel)
    samples = []
    seen_ids: dict[str, int] = {}
    for idx, raw in enumerate(raw_samples):
        where = f"record {idx}"
        if not isinstance(raw, dict):
            problems.append(f"{where}: not an object")
            continue
        before = len(problems)
        for key, typ in _VG_KEYS.items():
            value = raw.get(key)
            ok = isinstance(value, typ) and not (typ is int and isinstance(value, bool))
            if not ok:
                problems.append(f"{where}: field {key!r} missing or not {typ.__name__}")
        box = _parse_box(raw.get("bbox"), where, problems)
        if len(problems) > before or box is None:
            continue
        try:
            sample = GroundingSample(
                image_id=raw["image_id"],
                image_width=raw["width"],
                image_height=raw["height"],
                expression=raw["expression"],
                target=box,
                category=raw["category"],
                is_novel=raw["is_novel"],
            )
        except InputError as exc:
            problems.append(f"{where}: {exc}")
            continue
        if sample.image_id in seen_ids:
            problems.append(
                f"{where}: duplicate image_id {sample.image_id!r} "
                f"(first at record {seen_ids[sample.image_id]})"
            )
            continue
        seen_ids[sample.image_id] = idx
        if sample.category not in known:
            problems.append(f"{where}: category {sample.category!r} not in registry")
            continue
        expected_novel = sample.category in registry.novel
        if sample.is_novel != expected_novel:
            problems.append(
                f"{where}: is_novel={sample.is_novel} inconsistent with registry "
                f"for category {sample.category!r}"
            )
            continue
        samples.append(sample)

    if problems:
        raise ManifestError(f"{path}: invalid grounding manifest", problems)
    return DatasetManifest(split=split, registry=registry, samples=tuple(samples))


def load_pl_manifest(path) -> DatasetManifest:
    """Load and validate a phrase-localization manifest.

    Beyond record-level checks, every image must carry exactly two sentences
    with distinct ``uses_novel`` flags (one base-only, one base+novel).
    """
    doc = _read_json(path)
    problems: list[str] = []
    registry = _parse_registry(doc, problems)
    split = doc.get("split")
    if not isinstance(split, str) or not split:
        problems.append("split: missing or empty")
        split = ""
    raw_samples = doc.get("samples")
    if not isinstance(raw_samples, list):
        problems.append("samples: missing or not a list")
        raw_samples = []

    samples = []
    flags_by_image: dict[str, list[bool]] = {}
    for idx, raw in enumerate(raw_samples):
        where = f"record {idx}"
        if not isinstance(raw, dict):
            problems.append(f"{where}: not an object")
            continue
        before = len(problems)
        for key, typ in (("image_id", str), ("sentence", str), ("uses_novel", bool)):
            if not isinstance(raw.get(key), typ):
                problems.append(f"{where}: field {key!r} missing or not {typ.__name__}")
        chunks_raw = raw.get("chunks")
        chains_raw = raw.get("chains")
        if not isinstance(chunks_raw, list):
            problems.append(f"{where}: field 'chunks' missing or not a list")
            chunks_raw = []
        if not isinstance(chains_raw, dict):
            problems.append(f"{where}: field 'chains' missing or not an object")
            chains_raw = {}
        if len(problems) > before:
            continue

        chunks = []
        for c_idx, c_raw in enumerate(chunks_raw):
            if not isinstance(c_raw, dict) or not all(
                isinstance(c_raw.get(k), int) for k in ("start", "end", "chain")
            ):
                problems.append(f"{where}: chunk {c_idx} must carry int start/end/chain")
                continue
            try:
                chunks.append(PhraseChunk(c_raw["start"], c_raw["end"], c_raw["chain"]))
            except InputError as exc:
                problems.append(f"{where}: chunk {c_idx}: {exc}")
        chains: dict[int, tuple] = {}
        for key, boxes_raw in chains_raw.items():
            try:
                chain_id = int(key)
            except ValueError:
                problems.append(f"{where}: chain key {key!r} is not an integer")
                continue
            if not isinstance(boxes_raw, list):
                problems.append(f"{where}: chain {key}: boxes must be a list")
                continue
            boxes = []
            for b_idx, b_raw in enumerate(boxes_raw):
                box = _parse_box(b_raw, f"{where}: chain {key} box {b_idx}", problems)
                if box is not None:
                    boxes.append(box)
            chains[chain_id] = tuple(boxes)
        if len(problems) > before:
            continue

        try:
            sample = PLSample(
                image_id=raw["image_id"],
                sentence=raw["sentence"],
                uses_novel=raw["uses_novel"],
                chunks=tuple(chunks),
                chains=chains,
            )
        except InputError as exc:
            problems.append(f"{where}: {exc}")
            continue
        samples.append(sample)
        flags_by_image.setdefault(sample.image_id, []).append(sample.uses_novel)

    for image_id, flags in sorted(flags_by_image.items()):
        if sorted(flags) != [False, True]:
            problems.append(
                f"image {image_id!r}: needs exactly one base-only and one "
                f"base+novel sentence, got uses_novel={flags}"
            )

    if problems:
        raise ManifestError(f"{path}: invalid phrase-localization manifest", problems)
    return DatasetManifest(split=split, registry=registry, samples=tuple(samples))


def load_manifest(path) -> DatasetManifest:
    """Load either manifest kind, sniffing the record schema."""
    doc = _read_json(path)
    raw_samples = doc.get("samples") or []
    if raw_samples and isinstance(raw_samples[0], dict) and "sentence" in raw_samples[0]:
        return load_pl_manifest(path)
    return load_vg_manifest(path)


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    samples = []
    for s in manifest.samples:
        if isinstance(s, GroundingSample):
            samples.append(
                {
                    "image_id": s.image_id,
                    "width": s.image_width,
                    "height": s.image_height,
                    "expression": s.expression,
                    "bbox": list(s.target.as_tuple()),
                    "category": s.category,
                    "is_novel": s.is_novel,
                }
            )
        else:
            samples.append(
                {
                    "image_id": s.image_id,
                    "sentence": s.sentence,
                    "uses_novel": s.uses_novel,
                    "chunks": [
                        {"start": c.start, "end": c.end, "chain": c.chain} for c in s.chunks
                    ],
                    "chains": {
                        str(cid): [list(b.as_tuple()) for b in boxes]
                        for cid, boxes in sorted(s.chains.items())
                    },
                }
            )
    return {
        "split": manifest.split,
        "registry": manifest.registry.to_dict(),
        "samples": samples,
    }


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


# ---------------------------------------------------------------------------
# disjointness auditing


def check_disjointness(train: DatasetManifest, evaluation: DatasetManifest) -> DisjointnessReport:
    """Audit two splits for shared images and base/novel category collisions.

    A category collision is any name appearing in the combined base registry
    and the combined novel registry; either direction of leak fails.
    """
    shared = sorted(set(train.image_ids) & set(evaluation.image_ids))
    base = set(train.registry.base) | set(evaluation.registry.base)
    novel = set(train.registry.novel) | set(evaluation.registry.novel)
    return DisjointnessReport(
        shared_image_ids=tuple(shared),
        category_overlaps=tuple(sorted(base & novel)),
    )


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SyntheticDataset:
    manifest: DatasetManifest
    images: dict  # image_id -> uint8 (H, W, 3)


def synthetic_registry() -> CategoryRegistry:
    base = tuple(f"{c} {s}" for s in BASE_SHAPES for c in COLOR_TABLE)
    novel = tuple(f"{c} {s}" for s in NOVEL_SHAPES for c in COLOR_TABLE)
    return CategoryRegistry(base=base, novel=novel)


def _draw_shape(canvas: np.ndarray, shape: str, box: tuple, color: tuple) -> None:
    x1, y1, x2, y2 = box
    if shape in ("square", "rectangle"):
        canvas[y1:y2, x1:x2] = color
    else:
        h, w = y2 - y1, x2 - x1
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        mask = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
        region = canvas[y1:y2, x1:x2]
        region[mask] = color


def _place_shape(rng, size: int, low: int, high: int, shape: str, existing: list) -> tuple | None:
    for _ in range(30):
        w = int(rng.integers(low, high + 1))
        if shape in ("square", "circle"):
            h = w
        else:
            h = int(rng.integers(low, high + 1))
            if abs(h - w) < max(2, w // 5):
                continue  # keep novel shapes visibly non-square
        if w >= size or h >= size:
            continue
        x1 = int(rng.integers(0, size - w))
        y1 = int(rng.integers(0, size - h))
        box = (x1, y1, x1 + w, y1 + h)
        overlap = False
        for other in existing:
            ix = max(0, min(box[2], other[2]) - max(box[0], other[0]))
            iy = max(0, min(box[3], other[3]) - max(box[1], other[1]))
            if ix * iy > 0:
                overlap = True
                break
        if not overlap:
            return box
    return None


def _relation(a: tuple, b: tuple) -> str:
    ax, ay = (a[0] + a[2]) / 2.0, (a[1] + a[3]) / 2.0
    bx, by = (b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0
    if abs(ax - bx) >= abs(ay - by):
        return "left of" if ax < bx else "right of"
    return "above" if ay < by else "below"


def _sample_scene(rng, size: int, size_range: tuple, min_shapes: int, max_shapes: int,
                  require_both: bool = False):
    """Place 1..max distinct (color, shape) objects without overlap."""
    shapes = BASE_SHAPES + NOVEL_SHAPES
    colors = tuple(COLOR_TABLE)
    while True:
        count = int(rng.integers(min_shapes, max_shapes + 1))
        combos = [(c, s) for s in shapes for c in colors]
        order = rng.permutation(len(combos))
        placed = []
        boxes = []
        for pick in order:
            if len(placed) == count:
                break
            color, shape = combos[pick]
            box = _place_shape(rng, size, size_range[0], size_range[1], shape, boxes)
            if box is None:
                continue
            placed.append((color, shape, box))
            boxes.append(box)
        if len(placed) < min_shapes:
            continue
        if require_both:
            has_base = any(s in BASE_SHAPES for _, s, _ in placed)
            has_novel = any(s in NOVEL_SHAPES for _, s, _ in placed)
            if not (has_base and has_novel):
                continue
        return placed


def _render(placed, size: int) -> np.ndarray:
    canvas = np.empty((size, size, 3), dtype=np.uint8)
    canvas[:] = BACKGROUND
    for color, shape, box in placed:
        _draw_shape(canvas, shape, box, COLOR_TABLE[color])
    return canvas


def generate_synthetic(
    n: int,
    cfg: ModelConfig,
    seed: int,
    size_range: tuple | None = None,
    split: str = "train",
) -> SyntheticDataset:
    """Generate ``n`` grounding scenes of colored shapes with exact targets.

    Expressions are templated ("the red square", optionally with a spatial
    relation to a second object).  Deterministic per seed; the seed is baked
    into the image ids so differently-seeded sets stay disjoint.
    """
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    if size_range is None:
        size_range = (max(6, size // 8), size // 2)
    registry = synthetic_registry()

    samples = []
    images = {}
    for i in range(n):
        placed = _sample_scene(rng, size, size_range, 1, 3)
        target_idx = int(rng.integers(0, len(placed)))
        color, shape, box = placed[target_idx]
        category = f"{color} {shape}"
        expression = f"the {category}"
        if len(placed) > 1 and rng.random() < 0.5:
            other = placed[(target_idx + 1) % len(placed)]
            expression += (
                f" {_relation(box, other[2])} the {other[0]} {other[1]}"
            )
        image_id = f"scene-{seed}-{i:04d}"
        samples.append(
            GroundingSample(
                image_id=image_id,
                image_width=size,
                image_height=size,
                expression=expression,
                target=BBox(*[float(v) for v in box]),
                category=category,
                is_novel=shape in NOVEL_SHAPES,
            )
        )
        images[image_id] = _render(placed, size)

    manifest = DatasetManifest(split=split, registry=registry, samples=tuple(samples))
    return SyntheticDataset(manifest=manifest, images=images)


def generate_synthetic_pl(
    n: int,
    cfg: ModelConfig,
    seed: int,
    size_range: tuple | None = None,
    split: str = "pl",
) -> SyntheticDataset:
    """Generate ``n`` phrase-localization scenes.

    Each image yields two sentences: one mentioning only base-category
    objects and one mentioning every object, plus a boxless scene chain
    ("on a dark field").
    """
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    if size_range is None:
        size_range = (max(6, size // 8), size // 2)
    registry = synthetic_registry()

    samples = []
    images = {}
    for i in range(n):
        placed = _sample_scene(rng, size, size_range, 2, 3, require_both=True)
        image_id = f"plscene-{seed}-{i:04d}"
        images[image_id] = _render(placed, size)
        base_objs = [(c, s, b) for c, s, b in placed if s in BASE_SHAPES]
        for uses_novel, objs in ((False, base_objs), (True, placed)):
            mentions = []
            chains = {}
            sentence = ""
            for chain_id, (color, shape, box) in enumerate(objs):
                phrase = f"a {color} {shape}"
                prefix = "" if chain_id == 0 else " and "
                start = len(sentence) + len(prefix)
                sentence += prefix + phrase
                mentions.append(PhraseChunk(start, start + len(phrase), chain_id))
                chains[chain_id] = (BBox(*[float(v) for v in box]),)
            scene_chain = len(objs)
            tail = " on a dark field"
            start = len(sentence) + 1
            sentence += tail
            mentions.append(PhraseChunk(start, len(sentence), scene_chain))
            chains[scene_chain] = ()
            samples.append(
                PLSample(
                    image_id=image_id,
                    sentence=sentence,
                    uses_novel=uses_novel,
                    chunks=tuple(mentions),
                    chains=chains,
                )
            )

    manifest = DatasetManifest(split=split, registry=registry, samples=tuple(samples))
    return SyntheticDataset(manifest=manifest, images=images)


# ---------------------------------------------------------------------------
# image files


def write_dataset(dataset: SyntheticDataset, out_dir) -> Path:
    """Write manifest.json plus one PNG per image; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for image_id, array in sorted(dataset.images.items()):
        Image.fromarray(array).save(out_dir / f"{image_id}.png")
    manifest_path = out_dir / "manifest.json"
    save_manifest(dataset.manifest, manifest_path)
    return manifest_path


def load_image(manifest_path, image_id: str) -> np.ndarray:
    """Read the PNG for one sample as float32 in [0, 1], shape (H, W, 3)."""
    path = Path(manifest_path).parent / f"{image_id}.png"
    if not path.exists():
        raise InputError(f"image file missing: {path}")
    array = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return array / 255.0
