import math

import numpy as np
import pytest

from noduleseg.energy import (
    EnergyParams,
    Window,
    WindowProblem,
    brute_force_min,
    data_term,
    pairwise_energy,
    pairwise_term,
    tile_windows,
    total_energy,
    window_energy,
)
from oracles import all_labelings, energy_by_terms, random_energy_instance


def test_data_term_examples():
    assert data_term(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert data_term(0.5, 0) == pytest.approx(0.693147, abs=1e-6)
    assert data_term(1.0, 1) == pytest.approx(1e-6, rel=1e-5)
    assert data_term(1.0, 0, 1e-6) == pytest.approx(13.815510557964274, abs=1e-9)
    assert data_term(0.0, 1, 1e-6) == pytest.approx(-math.log(1e-6), abs=1e-9)


def test_pairwise_term_examples():
    params = EnergyParams(lam=1.0, sigma=0.2)
    assert pairwise_term(1, 1, 0.0, 1.0, params) == 0.0
    assert pairwise_term(0, 1, 0.4, 0.4, params) == 1.0
    wide = EnergyParams(lam=2.5, sigma=1e6)
    assert pairwise_term(0, 1, 0.0, 1.0, wide) == pytest.approx(2.5, rel=1e-10)
    assert pairwise_term(1, 0, 0.1, 0.3, params) == pytest.approx(math.exp(-0.04 / 0.08))


def test_params_validation_and_sigma_default():
    with pytest.raises(ValueError):
        EnergyParams(lam=-1)
    with pytest.raises(ValueError):
        EnergyParams(sigma=0.0)
    with pytest.raises(ValueError):
        EnergyParams(epsilon_clamp=0.5)
    img = np.array([[0.0, 1.0]])
    assert EnergyParams().sigma_for(img) == 0.5
    assert EnergyParams().sigma_for(np.zeros((2, 2))) == 1.0
    assert EnergyParams.from_dict(EnergyParams(0.7, 0.3).to_dict()) == EnergyParams(0.7, 0.3)


def test_total_energy_small_cases():
    params = EnergyParams(sigma=0.1)
    assert total_energy(np.ones((1, 1), np.uint8), np.full((1, 1), 0.3), np.zeros((1, 1)), params) \
        == pytest.approx(-math.log(0.3))
    e = total_energy(np.zeros((2, 2), np.uint8), np.full((2, 2), 0.5), np.random.rand(2, 2), params)
    assert e == pytest.approx(4 * math.log(2), abs=1e-12)


def test_total_energy_matches_term_oracle(rng):
    for _ in range(30):
        shape = tuple(rng.integers(1, 6, size=2))
        mask, probs, image = random_energy_instance(rng, shape)
        params = EnergyParams(lam=float(rng.uniform(0, 3)), sigma=float(rng.uniform(0.05, 1)))
        assert total_energy(mask, probs, image, params) == pytest.approx(
            energy_by_terms(mask, probs, image, params.lam, params.sigma), rel=1e-12, abs=1e-12)


def test_total_energy_dimension_mismatch():
    with pytest.raises(ValueError):
        total_energy(np.zeros((2, 2), np.uint8), np.zeros((2, 3)), np.zeros((2, 2)), EnergyParams())


def test_total_energy_finite_at_extreme_probabilities():
    mask = np.array([[0, 1], [1, 0]], np.uint8)
    probs = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert math.isfinite(total_energy(mask, probs, np.zeros((2, 2)), EnergyParams()))


def test_pairwise_sum_invariant_under_complement(rng):
    for _ in range(10):
        mask, _, image = random_energy_instance(rng, (6, 7))
        params = EnergyParams(lam=1.3)
        assert pairwise_energy(1 - mask, image, params) == pairwise_energy(mask, image, params)


def test_energy_monotone_in_lambda(rng):
    mask, probs, image = random_energy_instance(rng, (5, 5))
    energies = [total_energy(mask, probs, image, EnergyParams(lam=lam, sigma=0.3))
                for lam in (0.0, 0.5, 1.0, 2.0, 5.0)]
    assert all(a < b for a, b in zip(energies, energies[1:]))


# -- windows -------------------------------------------------------------------

def test_tile_windows_raster_order_with_ragged_edges():
    tiles = tile_windows((10, 7), 4)
    assert tiles[:2] == [Window(0, 0, 4, 4), Window(0, 4, 4, 3)]
    assert tiles[-1] == Window(8, 4, 2, 3)
    covered = np.zeros((10, 7), int)
    for t in tiles:
        covered[t.slices] += 1
    assert np.all(covered == 1)


def test_whole_image_window_equals_total(rng):
    mask, probs, image = random_energy_instance(rng, (5, 6))
    params = EnergyParams()
    assert window_energy(mask, Window(0, 0, 5, 6), probs, image, params) == pytest.approx(
        total_energy(mask, probs, image, params), rel=1e-12)


def test_interior_pixel_window_has_four_boundary_edges():
    image = np.zeros((3, 3))
    probs = np.full((3, 3), 0.5)
    mask = np.zeros((3, 3), np.uint8)
    mask[1, 1] = 1
    params = EnergyParams(lam=1.0, sigma=1.0)
    assert window_energy(mask, Window(1, 1, 1, 1), probs, image, params) == pytest.approx(math.log(2) + 4)


def test_window_energy_differences_track_total(rng):
    params = EnergyParams(lam=1.0)
    for _ in range(50):
        shape = (int(rng.integers(3, 10)), int(rng.integers(3, 10)))
        mask_a, probs, image = random_energy_instance(rng, shape)
        h, w = int(rng.integers(1, shape[0] + 1)), int(rng.integers(1, shape[1] + 1))
        win = Window(int(rng.integers(0, shape[0] - h + 1)), int(rng.integers(0, shape[1] - w + 1)), h, w)
        mask_b = mask_a.copy()
        mask_b[win.slices] = rng.random((h, w)) < 0.5
        d_total = total_energy(mask_a, probs, image, params) - total_energy(mask_b, probs, image, params)
        d_win = (window_energy(mask_a, win, probs, image, params)
                 - window_energy(mask_b, win, probs, image, params))
        assert abs(d_total - d_win) <= 1e-9


def test_window_out_of_bounds():
    z = np.zeros((4, 4))
    with pytest.raises(ValueError):
        window_energy(z.astype(np.uint8), Window(2, 2, 3, 1), z, z, EnergyParams())


def test_problem_energies_agree_with_single_evaluation(rng):
    mask, probs, image = random_energy_instance(rng, (8, 8))
    problem = WindowProblem(mask, Window(2, 2, 4, 4), probs, image, EnergyParams())
    bits = (rng.random((30, 16)) < 0.5).astype(np.uint8)
    batch = problem.energies(bits)
    for row, e in zip(bits, batch):
        assert problem.energy(row) == e


# -- brute force ---------------------------------------------------------------

def test_brute_force_single_pixel_picks_cheaper_label():
    image = np.zeros((3, 3))
    probs = np.full((3, 3), 0.5)
    probs[1, 1] = 0.9
    mask = np.zeros((3, 3), np.uint8)
    labels, energy = brute_force_min(mask, Window(1, 1, 1, 1), probs, image, EnergyParams(lam=0.01, sigma=1))
    assert labels.tolist() == [[1]]
    assert energy == pytest.approx(-math.log(0.9) + 4 * 0.01)
    labels, _ = brute_force_min(mask, Window(1, 1, 1, 1), probs, image, EnergyParams(lam=1.0, sigma=1))
    assert labels.tolist() == [[0]]


def test_brute_force_ties_prefer_zeros():
    probs = np.full((4, 4), 0.5)
    mask = np.zeros((4, 4), np.uint8)
    labels, energy = brute_force_min(mask, Window(1, 1, 2, 2), probs, np.zeros((4, 4)), EnergyParams(lam=1.0))
    assert labels.tolist() == [[0, 0], [0, 0]]
    assert energy == pytest.approx(4 * math.log(2))


def test_brute_force_tie_break_is_lexicographic():
    # isolated 1x2 window, no pairwise: all four labelings tie
    probs = np.full((1, 2), 0.5)
    labels, _ = brute_force_min(np.ones((1, 2), np.uint8), Window(0, 0, 1, 2), probs, np.zeros((1, 2)),
                                EnergyParams(lam=0.0))
    assert labels.tolist() == [[0, 0]]


def test_brute_force_minimizes_total_energy_over_all_fills(rng):
    for _ in range(5):
        mask, probs, image = random_energy_instance(rng, (5, 5))
        params = EnergyParams()
        win = Window(1, 1, 3, 3)
        labels, energy = brute_force_min(mask, win, probs, image, params)
        best_fill = mask.copy()
        best_fill[win.slices] = labels
        best_total = total_energy(best_fill, probs, image, params)
        for bits in all_labelings(9):
            trial = mask.copy()
            trial[win.slices] = bits.reshape(3, 3)
            assert best_total <= total_energy(trial, probs, image, params) + 1e-12
            assert energy <= window_energy(trial, win, probs, image, params)


def test_brute_force_rejects_oversized_window():
    z = np.zeros((5, 5))
    with pytest.raises(ValueError):
        brute_force_min(z.astype(np.uint8), Window(0, 0, 5, 4), z, z, EnergyParams())
