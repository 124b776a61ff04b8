"""
Procedural simple-shape dataset: 25 parametric classes built from lines, arcs,
angles, polygons, circles and stars, rendered with mask and edge ground truth,
plus class splits and c-way m1-shot episode sampling.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import cv2
import numpy as np
from skimage.draw import polygon2mask
from tqdm import tqdm

from errors import DatasetNotFoundError, EpisodeError, ShapeGenerationError
from logger_config import setup_logger

logger = setup_logger('shapegen')

MARGIN = 2
STROKE_HALF_WIDTH = 1.0
MIN_CONTRAST = 0.3
SCALE_RANGE = (0.4, 0.9)
MAX_ATTEMPTS = 10
MIN_AREA = 12
SEED_STRIDE = 1_000_000
MANIFEST = 'manifest.jsonl'

Part = Tuple[str, np.ndarray]


def _regular_polygon(sides: int, radius: float = 1.0, phase: float = np.pi / 2) -> np.ndarray:
    angles = phase + 2 * np.pi * np.arange(sides) / sides
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def _star(points: int, inner: float, outer: float = 1.0) -> np.ndarray:
    angles = np.pi / 2 + np.pi * np.arange(2 * points) / points
    radii = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
    return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)


def _ellipse(a: float, b: float, center: Tuple[float, float] = (0.0, 0.0), vertices: int = 96) -> np.ndarray:
    angles = 2 * np.pi * np.arange(vertices) / vertices
    return np.stack([center[0] + a * np.cos(angles), center[1] + b * np.sin(angles)], axis=1)


def _arc(radius: float, start_deg: float, stop_deg: float, vertices: int = 40, dy: float = 0.0) -> np.ndarray:
    angles = np.radians(np.linspace(start_deg, stop_deg, vertices))
    return np.stack([radius * np.cos(angles), radius * np.sin(angles) + dy], axis=1)


def _points(*coords: Tuple[float, float]) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64)


@dataclass(frozen=True)
class ShapeClass:
    """One parametric class: geometry in the unit disk, v pointing up."""
    class_id: int
    name: str
    build: Callable[[], List[Part]]

    @property
    def is_open(self) -> bool:
        return all(kind == 'stroke' for kind, _ in self.build())


def generate_class_library() -> List[ShapeClass]:
    """The 25 shape classes, in class-id order."""
    definitions: List[Tuple[str, Callable[[], List[Part]]]] = [
        ('line', lambda: [('stroke', _points((-0.95, 0.0), (0.95, 0.0)))]),
        ('folding_line', lambda: [('stroke', _points((-0.9, -0.4), (-0.2, 0.6), (0.9, 0.25)))]),
        ('angle', lambda: [('stroke', _points((0.9, -0.4), (-0.5, -0.4), (0.1, 0.64)))]),
        ('arc', lambda: [('stroke', _arc(0.9, -10.0, 190.0))]),
        ('zigzag', lambda: [('stroke', _points((-0.9, -0.3), (-0.54, 0.3), (-0.18, -0.3),
                                              (0.18, 0.3), (0.54, -0.3), (0.9, 0.3)))]),
        ('triangle', lambda: [('fill', _regular_polygon(3))]),
        ('square', lambda: [('fill', _regular_polygon(4, phase=np.pi / 4))]),
        ('pentagon', lambda: [('fill', _regular_polygon(5))]),
        ('hexagon', lambda: [('fill', _regular_polygon(6))]),
        ('octagon', lambda: [('fill', _regular_polygon(8, phase=np.pi / 8))]),
        ('circle', lambda: [('fill', _ellipse(1.0, 1.0))]),
        ('ellipse', lambda: [('fill', _ellipse(1.0, 0.55))]),
        ('semicircle', lambda: [('fill', _arc(0.9, 0.0, 180.0, vertices=48, dy=-0.35))]),
        ('cross', lambda: [('fill', _points((-0.28, 0.9), (0.28, 0.9), (0.28, 0.28), (0.9, 0.28),
                                            (0.9, -0.28), (0.28, -0.28), (0.28, -0.9), (-0.28, -0.9),
                                            (-0.28, -0.28), (-0.9, -0.28), (-0.9, 0.28), (-0.28, 0.28)))]),
        ('arrow', lambda: [('fill', _points((-0.9, 0.18), (0.2, 0.18), (0.2, 0.5), (0.95, 0.0),
                                            (0.2, -0.5), (0.2, -0.18), (-0.9, -0.18)))]),
        ('star4', lambda: [('fill', _star(4, 0.38))]),
        ('star5', lambda: [('fill', _star(5, 0.42))]),
        ('star6', lambda: [('fill', _star(6, 0.5))]),
        ('star8', lambda: [('fill', _star(8, 0.6))]),
        ('annulus', lambda: [('fill', _ellipse(1.0, 1.0)), ('cut', _ellipse(0.55, 0.55))]),
        ('crescent', lambda: [('fill', _ellipse(1.0, 1.0)), ('cut', _ellipse(0.85, 0.85, center=(0.45, 0.0)))]),
        ('t_shape', lambda: [('fill', _points((-0.7, 0.65), (0.7, 0.65), (0.7, 0.3), (0.2, 0.3),
                                              (0.2, -0.9), (-0.2, -0.9), (-0.2, 0.3), (-0.7, 0.3)))]),
        ('l_shape', lambda: [('fill', _points((-0.6, 0.75), (-0.2, 0.75), (-0.2, -0.35),
                                              (0.65, -0.35), (0.65, -0.7), (-0.6, -0.7)))]),
        ('trapezoid', lambda: [('fill', _points((-0.9, -0.4), (0.9, -0.4), (0.45, 0.5), (-0.45, 0.5)))]),
        ('rhombus', lambda: [('fill', _points((0.0, 0.95), (0.55, 0.0), (0.0, -0.95), (-0.55, 0.0)))]),
    ]
    return [ShapeClass(class_id, name, build) for class_id, (name, build) in enumerate(definitions)]


CLASS_LIBRARY = generate_class_library()
NUM_CLASSES = len(CLASS_LIBRARY)


@dataclass
class ShapeSample:
    image: np.ndarray
    mask: np.ndarray
    edge: np.ndarray
    class_id: int
    params: Dict[str, float]
    seed: int = -1


def shape_radius(scale: float, height: int, width: int) -> float:
    """Pixel radius of the unit disk for a given scale; leaves room for stroke and margin."""
    return scale * (min(height, width) / 2.0 - MARGIN - 2.0)


def sample_params(rng: np.random.Generator, height: int, width: int) -> Dict[str, float]:
    scale = float(rng.uniform(*SCALE_RANGE))
    rotation = float(rng.uniform(0.0, 360.0))
    reach = shape_radius(scale, height, width) + STROKE_HALF_WIDTH + MARGIN + 0.5
    cx = float(rng.uniform(reach, width - 1 - reach))
    cy = float(rng.uniform(reach, height - 1 - reach))
    bg = float(rng.uniform(0.0, 1.0))
    low_band = max(0.0, bg - MIN_CONTRAST)
    high_band = max(0.0, 1.0 - MIN_CONTRAST - bg)
    pick = float(rng.uniform(0.0, low_band + high_band))
    fg = pick if pick < low_band else bg + MIN_CONTRAST + (pick - low_band)
    return {'cx': cx, 'cy': cy, 'scale': scale, 'rotation': rotation, 'fg': fg, 'bg': bg}


def _to_pixels(points: np.ndarray, params: Dict[str, float], height: int, width: int) -> np.ndarray:
    """Unit-disk (u, v-up) coordinates → (row, col) pixel coordinates."""
    radius = shape_radius(params['scale'], height, width)
    theta = np.radians(params['rotation'])
    c, s = np.cos(theta), np.sin(theta)
    u, v = points[:, 0], points[:, 1]
    cols = params['cx'] + radius * (u * c - v * s)
    rows = params['cy'] - radius * (u * s + v * c)
    return np.stack([rows, cols], axis=1)


def _stroke_mask(polyline: np.ndarray, height: int, width: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    grid = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    best = np.full(grid.shape[0], np.inf)
    for start, stop in zip(polyline[:-1], polyline[1:]):
        segment = stop - start
        length_sq = float(segment @ segment)
        t = np.clip(((grid - start) @ segment) / length_sq, 0.0, 1.0) if length_sq > 0 else np.zeros(len(grid))
        nearest = start + t[:, None] * segment
        best = np.minimum(best, np.linalg.norm(grid - nearest, axis=1))
    return (best <= STROKE_HALF_WIDTH).reshape(height, width)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    count, labels = cv2.connectedComponents(mask.astype(np.uint8), connectivity=8)
    if count <= 2:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (1 + int(np.argmax(sizes)))


def edge_from_mask(mask: np.ndarray) -> np.ndarray:
    """Morphological gradient: mask minus its 4-neighbourhood erosion."""
    cross = cv2.getStructuringElement(cv2.MORPH_CROSS, (3, 3))
    eroded = cv2.erode(mask.astype(np.uint8), cross, borderType=cv2.BORDER_CONSTANT, borderValue=0)
    return mask & ~eroded.astype(bool)


def render_from_params(class_id: int, params: Dict[str, float], height: int, width: int) -> ShapeSample:
    """Rasterise one class with explicit parameters (no validity checks)."""
    shape_class = CLASS_LIBRARY[class_id]
    filled = np.zeros((height, width), dtype=bool)
    cut = np.zeros((height, width), dtype=bool)
    stroked = np.zeros((height, width), dtype=bool)
    for kind, geometry in shape_class.build():
        pixels = _to_pixels(geometry, params, height, width)
        if kind == 'fill':
            filled |= polygon2mask((height, width), pixels)
        elif kind == 'cut':
            cut |= polygon2mask((height, width), pixels)
        else:
            stroked |= _stroke_mask(pixels, height, width)
    mask = _largest_component((filled & ~cut) | stroked)
    edge = edge_from_mask(mask)
    image = (params['bg'] + (params['fg'] - params['bg']) * mask).astype(np.float32)
    return ShapeSample(image=image, mask=mask, edge=edge, class_id=class_id, params=dict(params))


def _is_valid(sample: ShapeSample) -> bool:
    mask = sample.mask
    area = int(mask.sum())
    if area < MIN_AREA:
        return False
    edge_count = int(sample.edge.sum())
    if edge_count == 0 or edge_count >= area:
        return False
    border = np.ones_like(mask)
    border[MARGIN:-MARGIN, MARGIN:-MARGIN] = False
    return not (mask & border).any()


def render_sample(class_id: int, seed: int, height: int = 32, width: int = 32) -> ShapeSample:
    """Deterministic sample for (class_id, seed, H, W); degenerate draws are resampled."""
    if height < 32 or width < 32:
        raise ShapeGenerationError(f"rasters must be at least 32×32, got {height}×{width}")
    if not 0 <= class_id < NUM_CLASSES:
        raise ShapeGenerationError(f"class id {class_id} outside [0, {NUM_CLASSES})")
    rng = np.random.default_rng([class_id, seed])
    for attempt in range(MAX_ATTEMPTS):
        params = sample_params(rng, height, width)
        sample = render_from_params(class_id, params, height, width)
        if _is_valid(sample):
            sample.seed = seed
            return sample
        logger.debug(f"class {class_id} seed {seed}: degenerate draw on attempt {attempt + 1}, resampling")
    raise ShapeGenerationError(f"class {class_id} seed {seed}: no valid shape after {MAX_ATTEMPTS} attempts")


def sample_seed(generation_seed: int, index: int) -> int:
    return generation_seed * SEED_STRIDE + index


@dataclass
class ShapeSplit:
    name: str
    samples: Dict[int, List[ShapeSample]] = field(default_factory=dict)

    @property
    def class_ids(self) -> List[int]:
        return sorted(self.samples)


def split_classes(num_train_classes: int = 15, num_test_classes: int = 10,
                  seed: int = 0) -> Tuple[List[int], List[int]]:
    """Deterministic disjoint partition of the class library."""
    if num_train_classes < 0 or num_test_classes < 0:
        raise EpisodeError("class counts must be non-negative")
    if num_train_classes + num_test_classes > NUM_CLASSES:
        raise EpisodeError(f"{num_train_classes} + {num_test_classes} classes exceed the library of {NUM_CLASSES}")
    order = np.random.default_rng(seed).permutation(NUM_CLASSES)
    train = sorted(int(c) for c in order[:num_train_classes])
    test = sorted(int(c) for c in order[num_train_classes:num_train_classes + num_test_classes])
    return train, test


def build_split(name: str, class_ids: Sequence[int], per_class: int, size: int = 32,
                seed: int = 0, progress: bool = False) -> ShapeSplit:
    """Render a split in memory."""
    if per_class >= SEED_STRIDE:
        raise ShapeGenerationError(f"per_class must be below {SEED_STRIDE}")
    split = ShapeSplit(name)
    jobs = [(class_id, index) for class_id in class_ids for index in range(per_class)]
    for class_id, index in tqdm(jobs, desc=f"render {name}", disable=not progress):
        sample = render_sample(class_id, sample_seed(seed, index), size, size)
        split.samples.setdefault(class_id, []).append(sample)
    return split


def _sample_paths(root: str, split: str, class_id: int, seed: int) -> Tuple[str, str, str]:
    base = os.path.join(root, split, CLASS_LIBRARY[class_id].name, str(seed))
    return base + '.png', base + '_mask.png', base + '_edge.png'


def write_dataset(root: str, train_classes: Sequence[int], test_classes: Sequence[int],
                  per_class: int, size: int = 32, seed: int = 0, progress: bool = False) -> int:
    """Render both splits to <root>/<split>/<class>/<seed>{,_mask,_edge}.png plus manifest.jsonl."""
    os.makedirs(root, exist_ok=True)
    records = []
    for split_name, class_ids in (('train', train_classes), ('test', test_classes)):
        split = build_split(split_name, class_ids, per_class, size, seed, progress=progress)
        for class_id in split.class_ids:
            os.makedirs(os.path.join(root, split_name, CLASS_LIBRARY[class_id].name), exist_ok=True)
            for sample in split.samples[class_id]:
                image_path, mask_path, edge_path = _sample_paths(root, split_name, class_id, sample.seed)
                cv2.imwrite(image_path, np.round(sample.image * 255.0).astype(np.uint8))
                cv2.imwrite(mask_path, sample.mask.astype(np.uint8) * 255)
                cv2.imwrite(edge_path, sample.edge.astype(np.uint8) * 255)
                records.append({
                    'split': split_name,
                    'class_id': class_id,
                    'class_name': CLASS_LIBRARY[class_id].name,
                    'seed': sample.seed,
                    'params': sample.params,
                })
    with open(os.path.join(root, MANIFEST), 'w', encoding='utf-8') as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + '\n')
    logger.info(f"Wrote {len(records)} samples to {root}")
    return len(records)


def load_split(root: str, split_name: str) -> ShapeSplit:
    """Read one split of a dataset tree written by write_dataset."""
    manifest_path = os.path.join(root, MANIFEST)
    if not os.path.exists(manifest_path):
        raise DatasetNotFoundError(f"no dataset manifest at {manifest_path}; run 'gen' first")
    split = ShapeSplit(split_name)
    with open(manifest_path, 'r', encoding='utf-8') as handle:
        for line in handle:
            record = json.loads(line)
            if record['split'] != split_name:
                continue
            class_id = int(record['class_id'])
            image_path, mask_path, edge_path = _sample_paths(root, split_name, class_id, int(record['seed']))
            image = cv2.imread(image_path, cv2.IMREAD_GRAYSCALE)
            mask = cv2.imread(mask_path, cv2.IMREAD_GRAYSCALE)
            edge = cv2.imread(edge_path, cv2.IMREAD_GRAYSCALE)
            if image is None or mask is None or edge is None:
                raise DatasetNotFoundError(f"missing image files for {image_path}")
            split.samples.setdefault(class_id, []).append(ShapeSample(
                image=(image.astype(np.float32) / 255.0),
                mask=mask > 127,
                edge=edge > 127,
                class_id=class_id,
                params=record['params'],
                seed=int(record['seed']),
            ))
    if not split.samples:
        raise DatasetNotFoundError(f"split '{split_name}' is empty in {root}")
    return split


@dataclass
class Episode:
    """Support and query sets, each slot-major, with global class → slot map."""
    support: List[Tuple[ShapeSample, int]]
    query: List[Tuple[ShapeSample, int]]
    class_map: Dict[int, int]

    @property
    def ways(self) -> int:
        return len(self.class_map)

    @property
    def shots(self) -> int:
        return len(self.support) // self.ways

    @property
    def queries(self) -> int:
        return len(self.query) // self.ways

    def _stack(self, items: List[Tuple[ShapeSample, int]], attribute: str) -> np.ndarray:
        return np.stack([getattr(sample, attribute) for sample, _ in items]).astype(np.float32)[:, None]

    def images(self, part: str = 'support') -> np.ndarray:
        return self._stack(getattr(self, part), 'image')

    def masks(self, part: str = 'support') -> np.ndarray:
        return self._stack(getattr(self, part), 'mask')

    def edges(self, part: str = 'support') -> np.ndarray:
        return self._stack(getattr(self, part), 'edge')

    def labels(self, part: str = 'support') -> np.ndarray:
        return np.array([slot for _, slot in getattr(self, part)], dtype=np.int64)


def sample_episode(split: ShapeSplit, ways: int, shots: int, queries: int,
                   rng: np.random.Generator) -> Episode:
    """Classes uniformly without replacement, samples without replacement within a class."""
    if ways < 1 or shots < 1 or queries < 1:
        raise EpisodeError("ways, shots and queries must all be at least 1")
    eligible = [c for c in split.class_ids if len(split.samples[c]) >= shots + queries]
    if len(split.class_ids) < ways:
        raise EpisodeError(f"split '{split.name}' has {len(split.class_ids)} classes, {ways} requested")
    if len(eligible) < len(split.class_ids):
        raise EpisodeError(f"split '{split.name}' has classes with fewer than {shots + queries} samples")
    chosen = rng.choice(split.class_ids, size=ways, replace=False)
    support: List[Tuple[ShapeSample, int]] = []
    query: List[Tuple[ShapeSample, int]] = []
    class_map: Dict[int, int] = {}
    for slot, class_id in enumerate(int(c) for c in chosen):
        class_map[class_id] = slot
        pool = split.samples[class_id]
        picks = rng.choice(len(pool), size=shots + queries, replace=False)
        support.extend((pool[i], slot) for i in picks[:shots])
        query.extend((pool[i], slot) for i in picks[shots:])
    return Episode(support=support, query=query, class_map=class_map)
