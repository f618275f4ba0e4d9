"""Clip sampling, jigsaw patch construction, synthetic clips, and dataset ingestion.

Frames are float32 RGB arrays in [0, 1]; masks are uint8 arrays in {0, 1}.
Dataset layout on disk: ``<root>/<split>/Frame/<case>/<idx>.jpg|png`` and
``<root>/<split>/GT/<case>/<idx>.png``.  ``load_dataset`` also accepts a root
that is itself a split directory (containing ``Frame/`` and ``GT/`` directly).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

DEFAULT_DELTA = 5

FRAME_EXTENSIONS = (".jpg", ".jpeg", ".png")


class Split(str, enum.Enum):
    TRAIN = "train"
    EASY_SEEN = "easy_seen"
    HARD_SEEN = "hard_seen"
    EASY_UNSEEN = "easy_unseen"
    HARD_UNSEEN = "hard_unseen"
    EXTERNAL = "external"


class MissingMaskError(Exception):
    """A frame file has no ground-truth mask with a matching stem."""


class ShortCaseError(Exception):
    """A case has fewer frames than a clip requires."""


class EmptyDatasetError(Exception):
    """No usable cases were found under the dataset root."""


class DegenerateGridError(Exception):
    """Jigsaw grid must be at least 2 patches per side."""


class InvalidSpecError(Exception):
    """Synthetic clip parameters are inconsistent or out of range."""


@dataclass
class VideoClip:
    """An anchor frame plus ``delta`` consecutive neighbour frames with masks.

    ``masks`` holds ``delta + 1`` entries, anchor mask first.  All frames and
    masks share one spatial size, and neighbour indices are consecutive in the
    source video.
    """

    case_id: str
    anchor: np.ndarray
    neighbors: list[np.ndarray]
    masks: list[np.ndarray]
    frame_indices: list[int]

    @property
    def delta(self) -> int:
        return len(self.neighbors)

    @property
    def height(self) -> int:
        return int(self.anchor.shape[0])

    @property
    def width(self) -> int:
        return int(self.anchor.shape[1])

    def all_frames(self) -> np.ndarray:
        """Anchor followed by neighbours as one (delta+1, H, W, 3) array."""
        return np.stack([self.anchor, *self.neighbors], axis=0)

    def all_masks(self) -> np.ndarray:
        return np.stack(self.masks, axis=0)

    def validate(self) -> None:
        if len(self.masks) != len(self.neighbors) + 1:
            raise ValueError("mask count must be delta + 1")
        shapes = {f.shape[:2] for f in [self.anchor, *self.neighbors]}
        shapes |= {m.shape for m in self.masks}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent frame/mask sizes: {shapes}")
        diffs = np.diff(self.frame_indices[1:])
        if diffs.size and not np.all(diffs == 1):
            raise ValueError("neighbour frame indices must be consecutive")


@dataclass
class PatchSet:
    """Shuffled jigsaw tiling of one frame.

    ``patches[j]`` is the source tile whose raster index is ``permutation[j]``.
    """

    patches: list[np.ndarray]
    permutation: np.ndarray
    grid: int
    source_frame_index: int = 0


@dataclass
class DatasetIndex:
    """Aligned frame/mask path lists per case, ordered by frame stem."""

    root: Path
    split: Split
    cases: dict[str, list[tuple[Path, Path]]]
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def case_ids(self) -> list[str]:
        return sorted(self.cases)

    def __len__(self) -> int:
        return len(self.cases)


def frame_sort_key(path: Path):
    """Order frame files by numeric stem when possible, else lexicographically."""
    try:
        return (0, int(path.stem), path.stem)
    except ValueError:
        return (1, 0, path.stem)


def load_dataset(root: Path | str, split: Split | str,
                 delta: int = DEFAULT_DELTA) -> DatasetIndex:
    """Index a dataset split, pairing every frame with its mask.

    Cases shorter than ``delta + 1`` frames are excluded and recorded in
    ``DatasetIndex.skipped``.  Raises ``MissingMaskError`` when a frame has no
    mask, ``EmptyDatasetError`` when nothing usable remains.
    """
    split = Split(split)
    root = Path(root)
    split_dir = root / split.value
    if not (split_dir / "Frame").is_dir():
        split_dir = root
    frame_root = split_dir / "Frame"
    gt_root = split_dir / "GT"
    if not frame_root.is_dir():
        raise EmptyDatasetError(f"no Frame/ directory under {split_dir}")

    cases: dict[str, list[tuple[Path, Path]]] = {}
    skipped: list[tuple[str, str]] = []
    for case_dir in sorted(p for p in frame_root.iterdir() if p.is_dir()):
        frames = sorted(
            (p for p in case_dir.iterdir() if p.suffix.lower() in FRAME_EXTENSIONS),
            key=frame_sort_key,
        )
        pairs = []
        for frame_path in frames:
            mask_path = gt_root / case_dir.name / f"{frame_path.stem}.png"
            if not mask_path.is_file():
                raise MissingMaskError(
                    f"frame {case_dir.name}/{frame_path.stem} has no mask at {mask_path}"
                )
            pairs.append((frame_path, mask_path))
        if len(pairs) < delta + 1:
            skipped.append((case_dir.name, f"{len(pairs)} frames < {delta + 1}"))
            continue
        if pairs:
            cases[case_dir.name] = pairs
    if not cases:
        raise EmptyDatasetError(f"no cases with >= {delta + 1} frames under {split_dir}")
    return DatasetIndex(root=root, split=split, cases=cases, skipped=skipped)


def read_frame(path: Path | str) -> np.ndarray:
    """Decode an image file to float32 RGB in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise FileNotFoundError(f"cannot read frame {path}")
    return raw[:, :, ::-1].astype(np.float32) / 255.0


def read_mask(path: Path | str) -> np.ndarray:
    """Decode a mask file to uint8 {0, 1}; foreground is pixel value > 127."""
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise FileNotFoundError(f"cannot read mask {path}")
    return (raw > 127).astype(np.uint8)


def write_frame(path: Path | str, frame: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bgr = (np.clip(frame, 0.0, 1.0) * 255.0).round().astype(np.uint8)[:, :, ::-1]
    if not cv2.imwrite(str(path), bgr):
        raise OSError(f"cannot write frame {path}")


def write_mask(path: Path | str, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), (mask > 0).astype(np.uint8) * 255):
        raise OSError(f"cannot write mask {path}")


def write_probability(path: Path | str, probs: np.ndarray) -> None:
    """Save a [0, 1] probability map as 8-bit grayscale (probs * 255)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = (np.clip(probs, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if not cv2.imwrite(str(path), img):
        raise OSError(f"cannot write probability map {path}")


def read_probability(path: Path | str) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise FileNotFoundError(f"cannot read probability map {path}")
    return raw.astype(np.float64) / 255.0


def sample_window(n_frames: int, delta: int, rng: np.random.Generator) -> int:
    """Uniformly choose the start of a ``delta + 1``-frame window."""
    n_starts = n_frames - delta
    if n_starts < 1:
        raise ShortCaseError(f"case of {n_frames} frames cannot hold delta={delta}")
    return int(rng.integers(0, n_starts))


def sample_clip(index: DatasetIndex, case_id: str, rng: np.random.Generator,
                delta: int = DEFAULT_DELTA) -> VideoClip:
    """Sample a clip from a case: anchor at the window start, then ``delta``
    consecutive neighbours, with all ``delta + 1`` masks."""
    if case_id not in index.cases:
        raise KeyError(f"unknown case {case_id!r}")
    pairs = index.cases[case_id]
    start = sample_window(len(pairs), delta, rng)
    window = pairs[start:start + delta + 1]
    frames = [read_frame(f) for f, _ in window]
    masks = [read_mask(m) for _, m in window]
    clip = VideoClip(
        case_id=case_id,
        anchor=frames[0],
        neighbors=frames[1:],
        masks=masks,
        frame_indices=list(range(start, start + delta + 1)),
    )
    clip.validate()
    return clip


def resize_clip(clip: VideoClip, size: tuple[int, int]) -> VideoClip:
    """Resize to (H, W): bilinear for frames, nearest-neighbour for masks."""
    h, w = size
    frames = [
        cv2.resize(f, (w, h), interpolation=cv2.INTER_LINEAR)
        for f in [clip.anchor, *clip.neighbors]
    ]
    masks = [
        cv2.resize(m, (w, h), interpolation=cv2.INTER_NEAREST)
        for m in clip.masks
    ]
    return VideoClip(
        case_id=clip.case_id,
        anchor=frames[0],
        neighbors=frames[1:],
        masks=masks,
        frame_indices=list(clip.frame_indices),
    )


def save_clip(clip: VideoClip, root: Path | str, split: Split | str = Split.TRAIN,
              start_index: int = 0) -> None:
    """Write a clip into the on-disk dataset layout (PNG frames and masks)."""
    split = Split(split)
    base = Path(root) / split.value
    frames = [clip.anchor, *clip.neighbors]
    for offset, (frame, mask) in enumerate(zip(frames, clip.masks)):
        idx = start_index + offset
        write_frame(base / "Frame" / clip.case_id / f"{idx:05d}.png", frame)
        write_mask(base / "GT" / clip.case_id / f"{idx:05d}.png", mask)


def crop_to_grid(frame: np.ndarray, grid: int) -> np.ndarray:
    """Crop (top-left anchored) so both sides are multiples of ``grid``."""
    h = (frame.shape[0] // grid) * grid
    w = (frame.shape[1] // grid) * grid
    return frame[:h, :w]


def make_jigsaw(frame: np.ndarray, grid: int, rng: np.random.Generator) -> PatchSet:
    """Tile a frame into ``grid**2`` equal patches and shuffle them.

    The recorded permutation maps storage slot -> source raster index, so
    ``reassemble_jigsaw`` can invert the shuffle exactly.
    """
    if grid < 2:
        raise DegenerateGridError(f"grid must be >= 2, got {grid}")
    if frame.shape[0] < grid or frame.shape[1] < grid:
        raise DegenerateGridError(f"frame {frame.shape[:2]} smaller than grid {grid}")
    region = crop_to_grid(frame, grid)
    ph, pw = region.shape[0] // grid, region.shape[1] // grid
    tiles = [
        region[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw].copy()
        for r in range(grid)
        for c in range(grid)
    ]
    permutation = rng.permutation(grid * grid)
    return PatchSet(
        patches=[tiles[int(src)] for src in permutation],
        permutation=permutation,
        grid=grid,
    )


def reassemble_jigsaw(patch_set: PatchSet) -> np.ndarray:
    """Undo the shuffle, reproducing the cropped source region bit-exactly."""
    grid = patch_set.grid
    perm = np.asarray(patch_set.permutation)
    if sorted(perm.tolist()) != list(range(grid * grid)):
        raise ValueError("permutation is not a bijection on the tile indices")
    ph, pw = patch_set.patches[0].shape[:2]
    out_shape = (grid * ph, grid * pw) + patch_set.patches[0].shape[2:]
    out = np.empty(out_shape, dtype=patch_set.patches[0].dtype)
    for slot, src in enumerate(perm.tolist()):
        r, c = divmod(int(src), grid)
        out[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw] = patch_set.patches[slot]
    return out


@dataclass
class SyntheticClipSpec:
    """Parameters for the deterministic moving-ellipse clip generator."""

    height: int = 64
    width: int = 112
    delta: int = DEFAULT_DELTA
    radius_range: tuple[float, float] = (6.0, 12.0)
    velocity: tuple[float, float] = (2.0, 0.0)
    seed: int = 0
    contrast: float = 0.5
    noise_sigma: float = 0.02
    case_id: str = "synthetic"

    def validate(self) -> None:
        if self.height < 32 or self.width < 32:
            raise InvalidSpecError("height and width must be >= 32")
        if self.delta < 1:
            raise InvalidSpecError("delta must be >= 1")
        lo, hi = self.radius_range
        if not (0 < lo <= hi):
            raise InvalidSpecError(f"bad radius_range {self.radius_range}")
        travel_x = abs(self.velocity[0]) * self.delta
        travel_y = abs(self.velocity[1]) * self.delta
        if 2 * hi + travel_x >= self.width - 2 or 2 * hi + travel_y >= self.height - 2:
            raise InvalidSpecError("ellipse cannot stay in frame for this velocity")


def _value_noise(h: int, w: int, rng: np.random.Generator, cell: int = 8) -> np.ndarray:
    coarse = rng.uniform(0.3, 0.7, size=(h // cell + 2, w // cell + 2)).astype(np.float32)
    return cv2.resize(coarse, (w, h), interpolation=cv2.INTER_LINEAR)


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    inside = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    return inside.astype(np.uint8)


def gen_synthetic_clip(spec: SyntheticClipSpec) -> VideoClip:
    """Textured background with a moving elliptical polyp; exact by seed.

    The mask is the exact ellipse interior, so integer velocities translate
    the mask (and its centroid) by exactly that many pixels per frame.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    n_frames = spec.delta + 1

    ry = float(rng.uniform(*spec.radius_range))
    rx = float(rng.uniform(*spec.radius_range))
    vx, vy = float(spec.velocity[0]), float(spec.velocity[1])
    x_lo = int(np.ceil(rx + 1 + max(0.0, -vx * spec.delta)))
    x_hi = int(np.floor(w - 2 - rx - max(0.0, vx * spec.delta)))
    y_lo = int(np.ceil(ry + 1 + max(0.0, -vy * spec.delta)))
    y_hi = int(np.floor(h - 2 - ry - max(0.0, vy * spec.delta)))
    if x_hi < x_lo or y_hi < y_lo:
        raise InvalidSpecError("no feasible start keeps the ellipse in frame")
    cx0 = int(rng.integers(x_lo, x_hi + 1))
    cy0 = int(rng.integers(y_lo, y_hi + 1))

    base = _value_noise(h, w, rng)
    tint = np.array([0.95, 1.0, 0.9], dtype=np.float32)
    polyp_tint = np.array([1.0, 0.55, 0.55], dtype=np.float32)

    frames: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    for t in range(n_frames):
        cx = cx0 + vx * t
        cy = cy0 + vy * t
        mask = _ellipse_mask(h, w, cy, cx, ry, rx)
        frame = base[:, :, None] * tint[None, None, :]
        frame = frame + spec.contrast * mask[:, :, None].astype(np.float32) * polyp_tint
        frame = frame + rng.normal(0.0, spec.noise_sigma, size=frame.shape).astype(np.float32)
        frames.append(np.clip(frame, 0.0, 1.0).astype(np.float32))
        masks.append(mask)

    clip = VideoClip(
        case_id=spec.case_id,
        anchor=frames[0],
        neighbors=frames[1:],
        masks=masks,
        frame_indices=list(range(n_frames)),
    )
    clip.validate()
    return clip
