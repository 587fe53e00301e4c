"""Segmentation energy over a labeled pixel grid.

``E(labels) = sum_i D(label_i) + sum_{(i,j)} V(label_i, label_j)`` where the
unary cost ``D`` is the negative log-likelihood of the network probability
and ``V`` is a contrast-sensitive Potts penalty on 4-neighbor edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .imaging import as_gray, as_mask

__all__ = [
    "EnergyParams",
    "Window",
    "WindowProblem",
    "data_term",
    "pairwise_term",
    "edge_weights",
    "total_energy",
    "pairwise_energy",
    "window_energy",
    "brute_force_min",
    "tile_windows",
]

BRUTE_FORCE_MAX_AREA = 16


@dataclass(frozen=True)
class EnergyParams:
    """Pairwise strength ``lam`` and contrast scale ``sigma``.

    ``sigma=None`` means "use the intensity standard deviation of the image
    being segmented", resolved per call by :meth:`sigma_for`.
    """

    lam: float = 1.0
    sigma: float | None = None
    epsilon_clamp: float = 1e-6
    connectivity: int = 4

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.epsilon_clamp < 0.5:
            raise ValueError("epsilon-clamp must lie in (0, 0.5)")
        if self.connectivity != 4:
            raise ValueError("only 4-connectivity is supported")

    def sigma_for(self, image: np.ndarray) -> float:
        if self.sigma is not None:
            return self.sigma
        std = float(np.std(image))
        return std if std > 0 else 1.0

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "sigma": self.sigma,
            "epsilon-clamp": self.epsilon_clamp,
            "connectivity": self.connectivity,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EnergyParams":
        sigma = doc.get("sigma")
        return cls(
            lam=float(doc.get("lambda", 1.0)),
            sigma=None if sigma is None else float(sigma),
            epsilon_clamp=float(doc.get("epsilon-clamp", 1e-6)),
            connectivity=int(doc.get("connectivity", 4)),
        )


class Window(NamedTuple):
    row: int
    col: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.row, self.row + self.height), slice(self.col, self.col + self.width)


def tile_windows(shape: tuple[int, int], size: int) -> list[Window]:
    """Non-overlapping ``size x size`` tiles in raster order; edge tiles may be smaller."""
    if size < 1:
        raise ValueError("window size must be >= 1")
    height, width = shape
    return [
        Window(r, c, min(size, height - r), min(size, width - c))
        for r in range(0, height, size)
        for c in range(0, width, size)
    ]


def data_term(p, label, epsilon_clamp: float = 1e-6):
    q = np.clip(p, epsilon_clamp, 1.0 - epsilon_clamp)
    return np.where(np.asarray(label) == 1, -np.log(q), -np.log1p(-q))


def pairwise_term(label_i, label_j, intensity_i, intensity_j, params: EnergyParams, sigma=None):
    sigma = params.sigma if sigma is None else sigma
    if sigma is None:
        raise ValueError("sigma must be resolved before evaluating a single edge")
    diff = np.asarray(intensity_i, dtype=np.float64) - intensity_j
    w = params.lam * np.exp(-diff * diff / (2.0 * sigma * sigma))
    return np.where(np.asarray(label_i) != np.asarray(label_j), w, 0.0)


def edge_weights(image: np.ndarray, params: EnergyParams) -> tuple[np.ndarray, np.ndarray]:
    """Potts weights of horizontal ``(h, w-1)`` and vertical ``(h-1, w)`` edges."""
    sigma = params.sigma_for(image)
    denom = 2.0 * sigma * sigma
    dh = image[:, 1:] - image[:, :-1]
    dv = image[1:, :] - image[:-1, :]
    return params.lam * np.exp(-dh * dh / denom), params.lam * np.exp(-dv * dv / denom)


def _validate(mask, probmap, image):
    mask = as_mask(mask)
    probmap = np.asarray(probmap, dtype=np.float64)
    image = as_gray(image)
    if not (mask.shape == probmap.shape == image.shape):
        raise ValueError(
            f"dimension mismatch: mask {mask.shape}, probmap {probmap.shape}, image {image.shape}"
        )
    return mask, probmap, image


def pairwise_energy(mask, image, params: EnergyParams) -> float:
    mask = as_mask(mask)
    image = as_gray(image)
    wh, wv = edge_weights(image, params)
    cut_h = mask[:, 1:] != mask[:, :-1]
    cut_v = mask[1:, :] != mask[:-1, :]
    return float(np.sum(wh[cut_h]) + np.sum(wv[cut_v]))


def total_energy(mask, probmap, image, params: EnergyParams) -> float:
    mask, probmap, image = _validate(mask, probmap, image)
    unary = float(np.sum(data_term(probmap, mask, params.epsilon_clamp)))
    return unary + pairwise_energy(mask, image, params)


class WindowProblem:
    """Energy of one window's labeling with every other label frozen.

    Costs of edges that leave the window are folded into per-pixel unary
    costs, so a candidate labeling is scored from ``cost0``/``cost1`` plus the
    Potts penalties of internal edges.  Labelings are flat row-major bit
    vectors of length ``window.area``.
    """

    def __init__(self, mask, window: Window, probmap, image, params: EnergyParams):
        mask, probmap, image = _validate(mask, probmap, image)
        h, w = mask.shape
        if (window.row < 0 or window.col < 0 or window.height < 1 or window.width < 1
                or window.row + window.height > h or window.col + window.width > w):
            raise ValueError(f"window {tuple(window)} out of bounds for image {w}x{h}")
        self.window = window
        rs, cs = window.slices
        wh, wv = edge_weights(image, params)
        eps = params.epsilon_clamp

        p = probmap[rs, cs]
        cost0 = data_term(p, 0, eps).astype(np.float64)
        cost1 = data_term(p, 1, eps).astype(np.float64)

        r0, c0, wh_n, ww_n = window
        # Edges leaving the window: penalty applies when the inside label
        # differs from the frozen outside label.
        if c0 > 0:
            wts, lab = wh[rs, c0 - 1], mask[rs, c0 - 1]
            cost0[:, 0] += np.where(lab == 1, wts, 0.0)
            cost1[:, 0] += np.where(lab == 0, wts, 0.0)
        if c0 + ww_n < w:
            wts, lab = wh[rs, c0 + ww_n - 1], mask[rs, c0 + ww_n]
            cost0[:, -1] += np.where(lab == 1, wts, 0.0)
            cost1[:, -1] += np.where(lab == 0, wts, 0.0)
        if r0 > 0:
            wts, lab = wv[r0 - 1, cs], mask[r0 - 1, cs]
            cost0[0, :] += np.where(lab == 1, wts, 0.0)
            cost1[0, :] += np.where(lab == 0, wts, 0.0)
        if r0 + wh_n < h:
            wts, lab = wv[r0 + wh_n - 1, cs], mask[r0 + wh_n, cs]
            cost0[-1, :] += np.where(lab == 1, wts, 0.0)
            cost1[-1, :] += np.where(lab == 0, wts, 0.0)

        idx = np.arange(window.area).reshape(wh_n, ww_n)
        self.edge_i = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
        self.edge_j = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
        self.edge_w = np.concatenate([wh[rs, c0:c0 + ww_n - 1].ravel(), wv[r0:r0 + wh_n - 1, cs].ravel()])
        self.cost0 = cost0.ravel()
        self.cost1 = cost1.ravel()
        self.current = mask[rs, cs].ravel().copy()
        self.probs = p.ravel().copy()

    @property
    def area(self) -> int:
        return self.window.area

    def energies(self, bits: np.ndarray) -> np.ndarray:
        """Energy of each row of a ``(n_labelings, area)`` 0/1 array."""
        bits = np.asarray(bits)
        unary = np.where(bits == 1, self.cost1, self.cost0)
        cut = bits[:, self.edge_i] != bits[:, self.edge_j]
        terms = np.concatenate([unary, cut * self.edge_w], axis=1)
        # cumsum adds strictly left to right, so a labeling scores the same
        # bits whatever batch it is evaluated in (np.sum does not promise that)
        return np.cumsum(terms, axis=1)[:, -1]

    def energy(self, labeling) -> float:
        return float(self.energies(np.asarray(labeling).reshape(1, -1))[0])


def window_energy(mask, window: Window, probmap, image, params: EnergyParams) -> float:
    """Part of the total energy that depends on labels inside ``window``.

    Data terms of window pixels plus every edge with at least one endpoint in
    the window.  Differences between two masks that agree outside the window
    equal the corresponding differences in :func:`total_energy`.
    """
    problem = WindowProblem(mask, window, probmap, image, params)
    return problem.energy(problem.current)


def brute_force_min(problem_or_mask, window: Window | None = None, probmap=None, image=None,
                    params: EnergyParams | None = None) -> tuple[np.ndarray, float]:
    """Exhaustive minimum of the window energy over all 2**area labelings.

    Ties go to the lexicographically smallest row-major bit string.  Returns
    the labeling shaped like the window and its energy.
    """
    if isinstance(problem_or_mask, WindowProblem):
        problem = problem_or_mask
    else:
        if window is not None and window.area > BRUTE_FORCE_MAX_AREA:
            raise ValueError(f"window area {window.area} exceeds brute-force limit {BRUTE_FORCE_MAX_AREA}")
        problem = WindowProblem(problem_or_mask, window, probmap, image, params)
    n = problem.area
    if n > BRUTE_FORCE_MAX_AREA:
        raise ValueError(f"window area {n} exceeds brute-force limit {BRUTE_FORCE_MAX_AREA}")
    codes = np.arange(2 ** n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    bits = ((codes[:, None] >> shifts) & 1).astype(np.uint8)
    energies = problem.energies(bits)
    best = int(np.argmin(energies))  # first occurrence = lexicographic tie-break
    w = problem.window
    return bits[best].reshape(w.height, w.width), float(energies[best])
