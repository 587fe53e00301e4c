"""Window-by-window genetic refinement of a binary mask.

A chromosome is the row-major labeling of one window.  Fitness is the window
energy (lower is better).  Parents are drawn uniformly at random; selection
pressure comes only from carrying the elite chromosomes over unchanged.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .energy import EnergyParams, Window, WindowProblem, tile_windows
from .imaging import as_mask

logger = logging.getLogger(__name__)

__all__ = [
    "GaConfig",
    "Population",
    "init_population",
    "select_parent",
    "crossover",
    "mutate",
    "evolve_generation",
    "optimize_window",
    "refine_mask",
]

INIT_FLIP_PROB = 0.1


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 100
    elite_count: int = 5
    crossover_rate: float = 0.2
    mutation_rate: float = 0.02
    iterations: int = 100
    window_size: int = 8
    seed: int | None = None

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population-size must be >= 2")
        if not 0 <= self.elite_count < self.population_size:
            raise ValueError("elite-count must be in [0, population-size)")
        if not 0.0 <= self.crossover_rate <= 1.0:
            raise ValueError("crossover-rate must lie in [0, 1]")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation-rate must lie in [0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.window_size < 1:
            raise ValueError("window-size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "population-size": self.population_size,
            "elite-count": self.elite_count,
            "crossover-rate": self.crossover_rate,
            "mutation-rate": self.mutation_rate,
            "iterations": self.iterations,
            "window-size": self.window_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaConfig":
        defaults = cls()
        seed = doc.get("seed")
        return cls(
            population_size=int(doc.get("population-size", defaults.population_size)),
            elite_count=int(doc.get("elite-count", defaults.elite_count)),
            crossover_rate=float(doc.get("crossover-rate", defaults.crossover_rate)),
            mutation_rate=float(doc.get("mutation-rate", defaults.mutation_rate)),
            iterations=int(doc.get("iterations", defaults.iterations)),
            window_size=int(doc.get("window-size", defaults.window_size)),
            seed=None if seed is None else int(seed),
        )


@dataclass
class Population:
    """Chromosomes as rows of ``bits`` with their cached window energies.

    ``fitness`` holds NaN for chromosomes that have not been scored yet.
    """

    bits: np.ndarray  # (size, area) uint8
    fitness: np.ndarray  # (size,)

    def __len__(self) -> int:
        return self.bits.shape[0]

    def evaluate(self, fitness_fn) -> "Population":
        stale = np.isnan(self.fitness)
        if stale.any():
            self.fitness[stale] = fitness_fn(self.bits[stale])
        return self

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.fitness))

    @property
    def best_fitness(self) -> float:
        return float(np.min(self.fitness))


def init_population(labeling, probs, config: GaConfig, rng: np.random.Generator) -> Population:
    """Seed a population from the current window labeling.

    Row 0 is the labeling itself, row 1 the probabilities thresholded at
    0.5, and the rest are copies of row 0 with each bit flipped with
    probability 0.1.
    """
    labeling = np.asarray(labeling, dtype=np.uint8).ravel()
    probs = np.asarray(probs, dtype=np.float64).ravel()
    if labeling.shape != probs.shape:
        raise ValueError("labeling and probabilities must cover the same window")
    size = config.population_size
    if size < 2:
        raise ValueError("population size must be >= 2")
    bits = np.empty((size, labeling.size), dtype=np.uint8)
    bits[0] = labeling
    bits[1] = probs >= 0.5
    flips = rng.random((size - 2, labeling.size)) < INIT_FLIP_PROB
    bits[2:] = labeling ^ flips
    return Population(bits, np.full(size, np.nan))


def select_parent(population, rng: np.random.Generator) -> int:
    size = len(population)
    if size < 1:
        raise ValueError("cannot select from an empty population")
    return int(rng.integers(size))


def _crossover_batch(a: np.ndarray, b: np.ndarray, rate: float, rng: np.random.Generator):
    pairs, length = a.shape
    do = rng.random(pairs) < rate
    if length < 2:
        return a.copy(), b.copy()
    cuts = rng.integers(1, length, size=pairs)
    head = (np.arange(length) < cuts[:, None]) | ~do[:, None]
    return np.where(head, a, b), np.where(head, b, a)


def crossover(parent_a, parent_b, rate: float, rng: np.random.Generator):
    """Single-point crossover performed with probability ``rate``."""
    a = np.asarray(parent_a, dtype=np.uint8)
    b = np.asarray(parent_b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError(f"parent length mismatch: {a.shape} vs {b.shape}")
    ca, cb = _crossover_batch(a.reshape(1, -1), b.reshape(1, -1), rate, rng)
    return ca[0], cb[0]


def _mutate_batch(bits: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    return bits ^ (rng.random(bits.shape) < rate).astype(np.uint8)


def mutate(chromosome, rate: float, rng: np.random.Generator) -> np.ndarray:
    return _mutate_batch(np.asarray(chromosome, dtype=np.uint8), rate, rng)


def evolve_generation(population: Population, fitness_fn, config: GaConfig,
                      rng: np.random.Generator) -> Population:
    """One generation: keep the elites, refill by select, crossover, mutate."""
    population.evaluate(fitness_fn)
    size = len(population)
    order = np.argsort(population.fitness, kind="stable")
    elite = order[:config.elite_count]

    n_children = size - config.elite_count
    n_pairs = (n_children + 1) // 2
    pa = rng.integers(size, size=n_pairs)
    pb = rng.integers(size, size=n_pairs)
    ca, cb = _crossover_batch(population.bits[pa], population.bits[pb], config.crossover_rate, rng)
    children = np.stack([ca, cb], axis=1).reshape(-1, population.bits.shape[1])[:n_children]
    children = _mutate_batch(children, config.mutation_rate, rng)

    bits = np.concatenate([population.bits[elite], children])
    fitness = np.concatenate([population.fitness[elite], fitness_fn(children)])
    return Population(bits, fitness)


def optimize_window(problem: WindowProblem, config: GaConfig, rng: np.random.Generator):
    """Run the GA on one window.

    Returns ``(best_bits, best_energy, history)`` where ``history[g]`` is
    the best energy after ``g`` generations (``history[0]`` is the initial
    population).
    """
    pop = init_population(problem.current, problem.probs, config, rng).evaluate(problem.energies)
    history = [pop.best_fitness]
    for _ in range(config.iterations):
        pop = evolve_generation(pop, problem.energies, config, rng)
        history.append(pop.best_fitness)
    best = pop.best_index
    return pop.bits[best].copy(), float(pop.fitness[best]), history


def _window_seeds(seed, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)


def refine_mask(
    mask,
    probmap,
    image,
    params: EnergyParams,
    config: GaConfig,
    schedule: str = "sequential",
    windows: list[Window] | None = None,
    trace: list | None = None,
    on_window=None,
) -> np.ndarray:
    """Refine ``mask`` by running the GA inside each tile.

    Tiles are ``config.window_size`` squares in raster order; the rest of the
    mask is frozen while a tile is optimized.  A tile's best labeling is
    written back only when its energy does not exceed the incumbent's, so
    the total energy never increases.

    ``trace`` (a list) receives ``(window_index, generation, best_energy)``
    rows.  ``on_window(index, window, mask_before, best_bits, best_energy)``
    is called after each tile, before write-back.  ``schedule="checkerboard"``
    optimizes non-adjacent tiles concurrently against a shared snapshot.
    """
    out = as_mask(mask).copy()
    all_windows = tile_windows(out.shape, config.window_size)
    seeds = _window_seeds(config.seed, len(all_windows))
    if windows is None:
        selected = list(range(len(all_windows)))
    else:
        lookup = {w: i for i, w in enumerate(all_windows)}
        try:
            selected = [lookup[Window(*w)] for w in windows]
        except KeyError as exc:
            raise ValueError(f"window {exc.args[0]} is not a tile of this grid") from exc

    def run(index: int, snapshot: np.ndarray):
        window = all_windows[index]
        problem = WindowProblem(snapshot, window, probmap, image, params)
        incumbent = problem.energy(problem.current)
        rng = np.random.default_rng(seeds[index])
        if config.iterations == 0:
            return index, problem.current, incumbent, incumbent, [incumbent]
        best_bits, best_energy, history = optimize_window(problem, config, rng)
        return index, best_bits, best_energy, incumbent, history

    def commit(result, snapshot):
        index, best_bits, best_energy, incumbent, history = result
        window = all_windows[index]
        if trace is not None:
            trace.extend((index, g, e) for g, e in enumerate(history))
        if on_window is not None:
            on_window(index, window, snapshot, best_bits.reshape(window.height, window.width), best_energy)
        if best_energy <= incumbent:
            out[window.slices] = best_bits.reshape(window.height, window.width)

    if schedule == "sequential":
        for index in selected:
            commit(run(index, out), out.copy() if on_window is not None else out)
    elif schedule == "checkerboard":
        size = config.window_size
        for color in (0, 1):
            batch = [i for i in selected
                     if (all_windows[i].row // size + all_windows[i].col // size) % 2 == color]
            snapshot = out.copy()
            with ThreadPoolExecutor() as pool:
                results = list(pool.map(lambda i: run(i, snapshot), batch))
            for result in results:
                commit(result, snapshot)
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    return out
