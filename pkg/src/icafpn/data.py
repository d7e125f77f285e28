"""Synthetic CT-like lesion scenes, HU windowing, and annotation I/O."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

HU_MIN, HU_MAX = -1024, 3071
SIZE_BUCKETS = {"small": (10, 18), "medium": (18, 32), "large": (32, 52)}
# generator constants, echoed into the manifest
TISSUE_HU = 45.0
EASY_CONTRAST = (60.0, 95.0)
HARD_CONTRAST = (14.0, 24.0)
NOISE_HU = 8.0


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruthBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class HUImage:
    values: np.ndarray  # (height, width) Hounsfield units

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all():
            raise ValueError("HU image contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def hu_window(img, level: float, width: float) -> np.ndarray:
    """Clamp to [level - width/2, level + width/2] and rescale to [0, 1]."""
    if width <= 0:
        raise ValueError(f"window width must be positive, got {width}")
    x = img.values if isinstance(img, HUImage) else np.asarray(img, dtype=np.float64)
    lo = level - width / 2.0
    return np.clip((x - lo) / width, 0.0, 1.0)


# ---- synthetic scenes ---------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    image_size: int = 128
    count: int = 100
    classes: int = 2
    hard_fraction: float = 0.16
    size_mix: tuple[float, float, float] = (0.4, 0.4, 0.2)
    texture_amplitude: float = 15.0
    blur_radius: float = 2.0
    max_lesions: int = 3
    empty_fraction: float = 0.1
    train_fraction: float = 0.7
    val_fraction: float = 0.15

    def __post_init__(self):
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError(f"hard_fraction must lie in [0, 1], got {self.hard_fraction}")
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.count < 0 or self.classes < 1 or self.max_lesions < 1:
            raise ValueError("count >= 0, classes >= 1 and max_lesions >= 1 required")
        if abs(sum(self.size_mix) - 1.0) > 1e-9:
            raise ValueError(f"size_mix must sum to 1, got {self.size_mix}")
        if self.train_fraction + self.val_fraction > 1.0 + 1e-12:
            raise ValueError("train_fraction + val_fraction exceeds 1")


@dataclass
class Scene:
    image_id: int
    hu: np.ndarray  # int16 HU
    boxes: list[GroundTruthBox]
    masks: list[np.ndarray]
    hard: bool


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u, v = dx * c + dy * s, -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _overlaps(box, others, margin: int) -> bool:
    x1, y1, x2, y2 = box
    return any(
        x1 - margin < o[2] and o[0] < x2 + margin and y1 - margin < o[3] and o[1] < y2 + margin for o in others
    )


def render_scene(cfg: SynthConfig, image_id: int, hard: bool, empty: bool) -> Scene:
    """One scene; depends only on (cfg, image_id, hard, empty)."""
    rng = np.random.default_rng([cfg.seed, image_id, 7])
    n = cfg.image_size
    texture = gaussian_filter(rng.normal(size=(n, n)), 3.0)
    texture *= cfg.texture_amplitude / (texture.std() + 1e-12)
    img = TISSUE_HU + texture
    # body outline: air outside a large ellipse, a fat band just inside it
    body = _ellipse_mask(n, n / 2, n / 2, 0.49 * n, 0.44 * n, rng.uniform(-0.2, 0.2))
    inner = _ellipse_mask(n, n / 2, n / 2, 0.45 * n, 0.40 * n, 0.0)
    img = np.where(inner, img, np.where(body, -90.0 + texture, -1000.0))

    if empty:
        count = 0
    else:
        count = int(rng.integers(1, cfg.max_lesions + 1))
    boxes: list[GroundTruthBox] = []
    masks: list[np.ndarray] = []
    placed: list[tuple[int, int, int, int]] = []
    for _ in range(count):
        bucket = "small" if hard else str(rng.choice(list(SIZE_BUCKETS), p=cfg.size_mix))
        cls = int(rng.integers(cfg.classes))
        for _attempt in range(60):
            lo, hi = SIZE_BUCKETS[bucket]
            diam = rng.uniform(lo, hi)
            aspect = rng.uniform(0.85, 1.0) if cls % 2 == 0 else rng.uniform(0.5, 0.7)
            a, b = diam / 2, diam * aspect / 2
            theta = rng.uniform(0, np.pi)
            cx, cy = rng.uniform(0.2 * n, 0.8 * n, size=2)
            mask = _ellipse_mask(n, cx, cy, a, b, theta)
            if not mask.any():
                continue
            box = _bbox(mask)
            if not (mask <= inner).all() or _overlaps(box, placed, 4):
                continue
            break
        else:
            continue
        contrast = rng.uniform(*(HARD_CONTRAST if hard else EASY_CONTRAST))
        sign = -1.0 if cls % 2 == 0 else 1.0
        alpha = gaussian_filter(mask.astype(np.float64), cfg.blur_radius if hard else 0.5)
        img = img + sign * contrast * alpha
        placed.append(box)
        masks.append(mask)
        boxes.append(GroundTruthBox(*map(float, box), class_id=cls))
    img = img + rng.normal(scale=NOISE_HU, size=(n, n))
    hu = np.clip(np.rint(img), HU_MIN, HU_MAX).astype(np.int16)
    return Scene(image_id, hu, boxes, masks, hard)


def plan_dataset(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Hard flags, empty flags and split names per image id (seeded, exact counts)."""
    rng = np.random.default_rng([cfg.seed, 0xD47A])
    n_hard = int(round(cfg.hard_fraction * cfg.count))
    hard = np.zeros(cfg.count, dtype=bool)
    hard[rng.permutation(cfg.count)[:n_hard]] = True
    empty = (rng.random(cfg.count) < cfg.empty_fraction) & ~hard
    order = rng.permutation(cfg.count)
    n_train = int(round(cfg.train_fraction * cfg.count))
    n_val = int(round(cfg.val_fraction * cfg.count))
    split = ["test"] * cfg.count
    for rank, i in enumerate(order):
        split[i] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return hard, empty, split


def synth_generate(cfg: SynthConfig) -> tuple[list[Scene], list[str]]:
    hard, empty, split = plan_dataset(cfg)
    scenes = [render_scene(cfg, i, bool(hard[i]), bool(empty[i])) for i in range(cfg.count)]
    return scenes, split


# ---- files ---------------------------------------------------------------------


def write_pgm(path: Path, hu: np.ndarray) -> None:
    """16-bit binary graymap storing HU + 1024."""
    h, w = hu.shape
    raw = (hu.astype(np.int32) - HU_MIN).astype(">u2").tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n4095\n".encode() + raw)


def read_pgm(path: Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end : end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end].decode())
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"{path}: unsupported graymap type {magic}")
    dt = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(buf, dtype=dt, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(np.int32) + HU_MIN


def format_gt_line(image_id: int, b: GroundTruthBox) -> str:
    return f"{image_id},{b.class_id},{b.x1:g},{b.y1:g},{b.x2:g},{b.y2:g}"


def write_annotations(path: Path, records: dict[int, list[GroundTruthBox]]) -> None:
    lines = ["# image_id,class_id,x1,y1,x2,y2"]
    for image_id in sorted(records):
        lines += [format_gt_line(image_id, b) for b in records[image_id]]
    Path(path).write_text("\n".join(lines) + "\n")


def load_annotations(path, image_size: int | None = None) -> dict[int, list[GroundTruthBox]]:
    """Parse ``image_id,class_id,x1,y1,x2,y2`` lines ('#' starts a comment)."""
    out: dict[int, list[GroundTruthBox]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise AnnotationError(f"line {lineno}: expected 6 fields, got {len(parts)}: {line!r}")
        try:
            image_id, cls = int(parts[0]), int(parts[1])
            x1, y1, x2, y2 = (float(p) for p in parts[2:])
        except ValueError as exc:
            raise AnnotationError(f"line {lineno}: {exc}: {line!r}") from None
        if not (x1 < x2 and y1 < y2):
            raise AnnotationError(f"line {lineno}: degenerate box (need x1<x2, y1<y2): {line!r}")
        if min(x1, y1) < 0 or (image_size is not None and max(x2, y2) > image_size):
            raise AnnotationError(f"line {lineno}: box outside image bounds: {line!r}")
        out.setdefault(image_id, []).append(GroundTruthBox(x1, y1, x2, y2, cls))
    return out


@dataclass
class Dataset:
    root: Path
    manifest: dict
    annotations: dict[int, list[GroundTruthBox]] = field(default_factory=dict)

    @property
    def image_size(self) -> int:
        return int(self.manifest["config"]["image_size"])

    @property
    def classes(self) -> int:
        return int(self.manifest["config"]["classes"])

    def ids(self, split: str | None = None) -> list[int]:
        return [r["id"] for r in self.manifest["images"] if split is None or r["split"] == split]

    def hu(self, image_id: int) -> np.ndarray:
        return read_pgm(self.root / "images" / f"{image_id:05d}.pgm")

    def boxes(self, image_id: int) -> list[GroundTruthBox]:
        return self.annotations.get(image_id, [])


def _content_hash(root: Path, names: list[str]) -> str:
    h = hashlib.sha256()
    for name in names:
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()


def write_dataset(cfg: SynthConfig, root) -> Dataset:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    scenes, split = synth_generate(cfg)
    records = []
    for sc in scenes:
        write_pgm(root / "images" / f"{sc.image_id:05d}.pgm", sc.hu)
        records.append(
            {"id": sc.image_id, "file": f"images/{sc.image_id:05d}.pgm", "split": split[sc.image_id],
             "hard": sc.hard, "lesions": len(sc.boxes)}
        )
    annotations = {sc.image_id: sc.boxes for sc in scenes if sc.boxes}
    write_annotations(root / "annotations.txt", annotations)
    names = [r["file"] for r in records] + ["annotations.txt"]
    manifest = {
        "config": asdict(cfg),
        "generator": {
            "tissue_hu": TISSUE_HU, "easy_contrast": EASY_CONTRAST, "hard_contrast": HARD_CONTRAST,
            "noise_hu": NOISE_HU, "size_buckets": SIZE_BUCKETS,
        },
        "images": records,
        "content_sha256": _content_hash(root, names),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return Dataset(root, manifest, annotations)


def open_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    ann = load_annotations(root / "annotations.txt", manifest["config"]["image_size"])
    return Dataset(root, manifest, ann)
