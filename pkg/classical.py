"""
Classical shape descriptors and their nearest-neighbour few-shot classifier.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import cv2
import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from errors import DescriptorError
from shapegen import Episode

DESCRIPTOR_KINDS = ('hu', 'fourier', 'shape_context')
MIN_BOUNDARY = 8
HU_FLOOR = 1e-4
FOURIER_SAMPLES = 128
SC_RADIAL_BINS = 5
SC_ANGULAR_BINS = 12
SC_INNER = 0.125
SC_OUTER = 2.0


@dataclass
class Descriptor:
    kind: str
    vector: np.ndarray
    raw: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None


def _as_u8(mask: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(mask) > 0, dtype=np.uint8)


def hu_moments(mask: np.ndarray) -> Descriptor:
    """Seven Hu invariants, log-magnitude transformed as sign(φ)·log10(|φ| / floor).

    Magnitudes at or below HU_FLOOR map to 0.
    """
    binary = _as_u8(mask)
    if not binary.any():
        raise DescriptorError("hu_moments on an empty mask")
    raw = cv2.HuMoments(cv2.moments(binary, binaryImage=True)).ravel()
    vector = np.sign(raw) * np.log10(np.maximum(np.abs(raw), HU_FLOOR) / HU_FLOOR)
    return Descriptor('hu', vector, raw=raw)


def boundary_trace(mask: np.ndarray) -> np.ndarray:
    """Ordered outer boundary pixels (x, y) of the largest component, counterclockwise with y up."""
    contours, _ = cv2.findContours(_as_u8(mask), cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    if not contours:
        raise DescriptorError("mask has no boundary")
    contour = max(contours, key=len).reshape(-1, 2).astype(np.float64)
    x, y = contour[:, 0], -contour[:, 1]
    signed_area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    if signed_area < 0:
        contour = contour[::-1]
    if len(contour) < MIN_BOUNDARY:
        raise DescriptorError(f"boundary has {len(contour)} pixels, at least {MIN_BOUNDARY} needed")
    return contour


def resample_by_arc_length(boundary: np.ndarray, count: int = FOURIER_SAMPLES) -> np.ndarray:
    """`count` points evenly spaced along the closed boundary polygon, starting at its first vertex."""
    closed = np.vstack([boundary, boundary[:1]])
    lengths = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    keep = np.concatenate([[True], lengths > 0])
    closed = closed[keep]
    cumulative = np.concatenate([[0.0], np.cumsum(lengths[lengths > 0])])
    targets = np.arange(count) * cumulative[-1] / count
    return np.stack([np.interp(targets, cumulative, closed[:, 0]),
                     np.interp(targets, cumulative, closed[:, 1])], axis=1)


def fourier_coefficients(boundary: np.ndarray, harmonics: int) -> np.ndarray:
    """Coefficients 1..K of the DFT of z = x − i·y over the arc-length resampled boundary.

    Image rows grow downwards, so z runs counterclockwise and c₁ is the dominant term.
    """
    if not 1 <= harmonics < FOURIER_SAMPLES // 2:
        raise DescriptorError(f"harmonics must lie in [1, {FOURIER_SAMPLES // 2}), got {harmonics}")
    points = resample_by_arc_length(boundary)
    z = points[:, 0] - 1j * points[:, 1]
    spectrum = np.fft.fft(z) / FOURIER_SAMPLES
    return spectrum[1:harmonics + 1]


def fourier_descriptor(mask: np.ndarray, harmonics: int = 16) -> Descriptor:
    """|c_k| / |c_1| for k = 1..K; invariant to translation, rotation, scale and start point."""
    coefficients = fourier_coefficients(boundary_trace(mask), harmonics)
    magnitudes = np.abs(coefficients)
    if magnitudes[0] < 1e-12:
        raise DescriptorError("first Fourier harmonic vanishes; boundary is degenerate")
    return Descriptor('fourier', magnitudes / magnitudes[0], raw=coefficients)


def _resample_boundary(boundary: np.ndarray, count: int) -> np.ndarray:
    if len(boundary) <= count:
        return boundary
    picks = np.floor(np.arange(count) * len(boundary) / count).astype(int)
    return boundary[picks]


def shape_context(mask: np.ndarray, points: int = 64) -> Descriptor:
    """Per-point log-polar histograms (5 radial × 12 angular) of the other boundary points."""
    sampled = _resample_boundary(boundary_trace(mask), points)
    count = len(sampled)
    distances = cdist(sampled, sampled)
    off_diagonal = ~np.eye(count, dtype=bool)
    normalized = distances / distances[off_diagonal].mean()
    radial_edges = np.logspace(np.log10(SC_INNER), np.log10(SC_OUTER), SC_RADIAL_BINS + 1)
    radial = np.clip(np.searchsorted(radial_edges, normalized, side='right') - 1, 0, SC_RADIAL_BINS - 1)
    delta = sampled[None, :, :] - sampled[:, None, :]
    angles = np.mod(np.arctan2(-delta[..., 1], delta[..., 0]), 2 * np.pi)
    angular = np.minimum((angles / (2 * np.pi) * SC_ANGULAR_BINS).astype(int), SC_ANGULAR_BINS - 1)
    histograms = np.zeros((count, SC_RADIAL_BINS * SC_ANGULAR_BINS))
    rows, cols = np.nonzero(off_diagonal)
    np.add.at(histograms, (rows, radial[rows, cols] * SC_ANGULAR_BINS + angular[rows, cols]), 1.0)
    return Descriptor('shape_context', histograms, points=sampled)


def hungarian(cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Minimum-cost assignment; returns rows, columns and the total cost."""
    rows, cols = linear_sum_assignment(cost)
    return rows, cols, float(cost[rows, cols].sum())


def chi_square_costs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise χ² costs between normalized histogram rows of a and b."""
    ha = a / np.maximum(a.sum(axis=1, keepdims=True), 1e-12)
    hb = b / np.maximum(b.sum(axis=1, keepdims=True), 1e-12)
    numerator = (ha[:, None, :] - hb[None, :, :]) ** 2
    denominator = ha[:, None, :] + hb[None, :, :]
    return 0.5 * np.where(denominator > 0, numerator / np.where(denominator > 0, denominator, 1.0), 0.0).sum(axis=2)


def sc_distance(a: Descriptor, b: Descriptor) -> float:
    """Mean per-point χ² cost under the optimal point assignment."""
    rows, _, total = hungarian(chi_square_costs(a.vector, b.vector))
    return total / len(rows)


def describe(kind: str, mask: np.ndarray) -> Descriptor:
    if kind == 'hu':
        return hu_moments(mask)
    if kind == 'fourier':
        return fourier_descriptor(mask)
    if kind in ('shape_context', 'sc'):
        return shape_context(mask)
    raise DescriptorError(f"unknown descriptor kind '{kind}', expected one of {DESCRIPTOR_KINDS}")


def classical_episode_eval(kind: str, episode: Episode) -> Tuple[np.ndarray, float]:
    """Predicted query slots and accuracy for one episode."""
    support = [(describe(kind, sample.mask), slot) for sample, slot in episode.support]
    queries = [(describe(kind, sample.mask), slot) for sample, slot in episode.query]
    ways = episode.ways
    predictions: List[int] = []
    if kind in ('hu', 'fourier'):
        prototypes = np.stack([
            np.mean([d.vector for d, slot in support if slot == k], axis=0) for k in range(ways)
        ])
        for descriptor, _ in queries:
            distances = np.linalg.norm(prototypes - descriptor.vector[None, :], axis=1)
            predictions.append(int(np.argmin(distances)))
    else:
        for descriptor, _ in queries:
            costs = [np.mean([sc_distance(descriptor, d) for d, slot in support if slot == k]) for k in range(ways)]
            predictions.append(int(np.argmin(costs)))
    predicted = np.asarray(predictions, dtype=np.int64)
    truth = np.array([slot for _, slot in queries], dtype=np.int64)
    accuracy = float(np.mean(predicted == truth)) if len(truth) else 0.0
    return predicted, accuracy
