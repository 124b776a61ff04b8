"""
PNG artifacts: primitive interpolation strip, decoded primitive grid, and the
query/support matching panel.
"""

import os
from typing import Dict, List

import cv2
import numpy as np

from fssd import FSSDModel, decode_vector, interpolate_primitives, predict
from logger_config import setup_logger
from shapegen import Episode
from tensor import no_grad
from trainer import forward_episode

logger = setup_logger('visualize')

TILE_SCALE = 4
GAP = 2
RED = (0, 0, 255)
SCORE_COLOR = (0, 255, 255)
FRAME_WIDTH = 2


def to_u8(raster: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(raster, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _tile(raster: np.ndarray) -> np.ndarray:
    return cv2.resize(to_u8(raster), None, fx=TILE_SCALE, fy=TILE_SCALE, interpolation=cv2.INTER_NEAREST)


def _hstack(tiles: List[np.ndarray]) -> np.ndarray:
    height = tiles[0].shape[0]
    gap = np.zeros((height, GAP) + tiles[0].shape[2:], dtype=np.uint8)
    pieces = []
    for index, tile in enumerate(tiles):
        if index:
            pieces.append(gap)
        pieces.append(tile)
    return np.concatenate(pieces, axis=1)


def _vstack(rows: List[np.ndarray]) -> np.ndarray:
    width = max(row.shape[1] for row in rows)
    padded = [np.pad(row, ((0, GAP), (0, width - row.shape[1])) + ((0, 0),) * (row.ndim - 2)) for row in rows]
    return np.concatenate(padded, axis=0)[:-GAP]


def write_interpolation(model: FSSDModel, i: int, j: int, out_dir: str) -> List[np.ndarray]:
    """Decode the 11 interpolation frames between φᵢ and φⱼ; one PNG per frame plus a strip."""
    frames = interpolate_primitives(model, i, j)
    os.makedirs(out_dir, exist_ok=True)
    for index, frame in enumerate(frames):
        cv2.imwrite(os.path.join(out_dir, f'interp_{index:02d}.png'), to_u8(frame))
    cv2.imwrite(os.path.join(out_dir, 'interpolation_strip.png'), _hstack([_tile(frame) for frame in frames]))
    logger.info(f"Wrote {len(frames)} interpolation frames between primitives {i} and {j} to {out_dir}")
    return frames


def write_primitive_grid(model: FSSDModel, out_path: str, columns: int = 10, head: str = 'mask') -> np.ndarray:
    """Decode every primitive on its own and tile the results row by row."""
    phi = model.bank.phi.data
    tiles = [_tile(decode_vector(model, row, head)) for row in phi]
    blank = np.zeros_like(tiles[0])
    while len(tiles) % columns:
        tiles.append(blank)
    grid = _vstack([_hstack(tiles[start:start + columns]) for start in range(0, len(tiles), columns)])
    directory = os.path.dirname(out_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    cv2.imwrite(out_path, grid)
    return grid


def match_scores(model: FSSDModel, episode: Episode) -> np.ndarray:
    """Cosine scores (queries × ways) of an episode under the model."""
    with no_grad():
        return forward_episode(model, episode, decode=False)['logits'].data.astype(np.float64)


def write_match_panel(model: FSSDModel, episode: Episode, out_path: str) -> Dict[str, np.ndarray]:
    """One row per query: the query tile, then one support tile per class with its score.

    The best-scoring support is framed in red.
    """
    scores = match_scores(model, episode)
    predictions = predict(scores)
    first_support = {}
    for sample, slot in episode.support:
        first_support.setdefault(slot, sample)
    rows = []
    for query_index, (sample, _) in enumerate(episode.query):
        tiles = [cv2.cvtColor(_tile(sample.image), cv2.COLOR_GRAY2BGR)]
        for slot in range(episode.ways):
            tile = cv2.cvtColor(_tile(first_support[slot].image), cv2.COLOR_GRAY2BGR)
            cv2.putText(tile, f"{scores[query_index, slot]:.2f}", (2, 12),
                        cv2.FONT_HERSHEY_SIMPLEX, 0.35, SCORE_COLOR, 1, cv2.LINE_AA)
            if slot == predictions[query_index]:
                cv2.rectangle(tile, (0, 0), (tile.shape[1] - 1, tile.shape[0] - 1), RED, FRAME_WIDTH)
            tiles.append(tile)
        rows.append(_hstack(tiles))
    panel = _vstack(rows)
    directory = os.path.dirname(out_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    cv2.imwrite(out_path, panel)
    logger.info(f"Wrote matching panel for {len(rows)} queries to {out_path}")
    return {'scores': scores, 'predictions': predictions, 'panel': panel}
