from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndwp_atlas.classical import find_island, locate_resonance
from ndwp_atlas.floquet import (PHASES, DriveParameters, FloquetState, GridSpec, Phase,
                                PotentialSpec, evolve_to_phase, floquet_states,
                                one_period_propagator)
from ndwp_atlas.phase_portrait import (BACKGROUND, IMAGE_SIZE, HusimiGrid, StateImage, apply_colormap, box_mass_fraction,
                                       coherent_state, husimi_field, husimi_mass,
                                       husimi_values, pixel_to_phase_space, read_png,
                                       render_state, write_png)

GRID = GridSpec(256, -12.0, 12.0, 256)
HG = HusimiGrid((-10.0, 10.0), (-10.0, 10.0))


def coherent(x0, p0, grid=GRID):
    return FloquetState(coherent_state(grid.x, x0, p0), 0.0, 0.0)


# ---------------------------------------------------------------- Husimi

def test_coherent_state_peak_is_one_over_pi():
    hg = HusimiGrid((-1.0, 3.0), (-3.0, 1.0), (81, 81))      # lattice hits (1, -1) exactly
    f = husimi_field(coherent(1.0, -1.0), GRID, hg)
    j, i = np.unravel_index(np.argmax(f.values), f.values.shape)
    assert abs(f.values.max() - 1 / math.pi) < 1e-3
    assert abs(hg.xs[i] - 1.0) < 1e-9 and abs(hg.ps[j] + 1.0) < 1e-9


def test_husimi_normalization_on_padded_window():
    f = husimi_field(coherent(2.0, 1.5), GRID, HG)
    assert abs(husimi_mass(f, HG) - 1.0) < 1e-2
    assert not f.flags


def test_husimi_flags_mass_outside_window():
    hg = HusimiGrid((-2.0, 2.0), (-2.0, 2.0), (32, 32))
    f = husimi_field(coherent(5.0, 0.0), GRID, hg)
    assert f.flags and "outside" in f.flags[0]


def test_husimi_of_coherent_state_matches_closed_form():
    # Q for a coherent state is (1/pi) exp(-((x-x0)^2 + (p-p0)^2)/2).
    f = husimi_field(coherent(-1.0, 2.0), GRID, HG)
    X, P = np.meshgrid(HG.xs, HG.ps)
    ref = np.exp(-((X + 1) ** 2 + (P - 2) ** 2) / 2) / math.pi
    assert np.max(np.abs(f.values - ref)) < 1e-8


def test_ground_state_husimi_rotationally_symmetric():
    hg = HusimiGrid((-4.0, 4.0), (-4.0, 4.0), (161, 161))
    f = husimi_field(coherent(0.0, 0.0), GRID, hg)
    X, P = np.meshgrid(hg.xs, hg.ps)
    # Compare points at equal radius reached by rotating (x, p) -> (p, -x).
    assert np.max(np.abs(f.values - np.rot90(f.values))) < 1e-3


@settings(max_examples=15, deadline=None)
@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(0, 2 * math.pi), st.floats(-3, 3))
def test_husimi_bounded_for_superpositions(x0, p0, phi, x1):
    psi = coherent_state(GRID.x, x0, p0) + np.exp(1j * phi) * coherent_state(GRID.x, x1, 0.0)
    psi /= math.sqrt(np.sum(np.abs(psi) ** 2) * GRID.dx)
    q = husimi_values(psi, GRID, HusimiGrid((-8, 8), (-8, 8), (40, 40)))
    assert q.min() >= 0 and q.max() <= 1 / math.pi + 1e-6


def test_husimi_quadrature_stable_under_grid_doubling():
    psi1 = coherent_state(GRID.x, 1.0, 1.0)
    fine = GridSpec(512, -12.0, 12.0, 256)
    psi2 = coherent_state(fine.x, 1.0, 1.0)
    hg = HusimiGrid((-6, 6), (-6, 6), (48, 48))
    assert np.max(np.abs(husimi_values(psi1, GRID, hg) - husimi_values(psi2, fine, hg))) < 1e-4


def test_husimi_grid_validation():
    with pytest.raises(ValueError):
        HusimiGrid(resolution=(8, 150))
    with pytest.raises(ValueError):
        HusimiGrid(sigma=0.0)


# ---------------------------------------------------------------- colormap

def test_colormap_anchors():
    f = np.array([[0.0, 0.5, 1.0], [0.25, 0.75, 0.0]])
    rgb = apply_colormap(f)
    assert tuple(rgb[:, 0, 0]) == (13, 8, 135)
    assert tuple(rgb[:, 0, 2]) == (240, 249, 33)
    assert tuple(rgb[:, 0, 1]) == (204, 71, 120)
    assert tuple(rgb[:, 1, 0]) == (126, 3, 168)
    assert tuple(rgb[:, 1, 1]) == (248, 149, 64)
    assert BACKGROUND == (13, 8, 135)


def test_colormap_fixed_max_and_interpolation():
    rgb = apply_colormap(np.array([[1.0, 4.0, 8.0]]), normalize=2.0)
    # 0.5 of FixedMax -> midpoint anchor; values above the max clip to the top anchor.
    assert tuple(rgb[:, 0, 0]) == (204, 71, 120)
    assert tuple(rgb[:, 0, 1]) == tuple(rgb[:, 0, 2]) == (240, 249, 33)
    # 1/8 of the range: halfway between the first two anchors (69.5 -> 70 by rint).
    mid = apply_colormap(np.array([[0.125, 1.0]]))
    assert tuple(mid[:, 0, 0]) == (70, 6, 152)


def test_colormap_zero_field_is_background():
    rgb = apply_colormap(np.zeros((4, 4)))
    assert np.all(rgb[0] == 13) and np.all(rgb[2] == 135)


# ---------------------------------------------------------------- rendering

def test_render_deterministic_and_shaped():
    s = coherent(1.0, 0.0)
    a = render_state(s, "PS", HG, grid=GRID)
    b = render_state(s, "PS", HG, grid=GRID)
    assert a.pixels.shape == (3, IMAGE_SIZE, IMAGE_SIZE)
    assert np.array_equal(a.pixels, b.pixels)


def test_ps_image_orientation():
    # p increases upward: a packet at positive p lands in the top half.
    img = render_state(coherent(-5.0, 5.0), "PS", HG, grid=GRID)
    lum = img.pixels.astype(float).sum(axis=0)
    r, c = np.unravel_index(np.argmax(lum), lum.shape)
    x, p = pixel_to_phase_space(np.array([r]), np.array([c]), HG)
    assert abs(x[0] + 5.0) < 0.2 and abs(p[0] - 5.0) < 0.2


def test_cs_image_of_stationary_state_rows_identical():
    pot = PotentialSpec(beta=0.0)
    drive = DriveParameters(omega=1.0)
    s = FloquetState(coherent_state(GRID.x, 0.0, 0.0), -0.5, 0.0)
    img = render_state(s, "CS", HG, potential=pot, drive=drive, grid=GRID)
    assert np.all(img.pixels == img.pixels[:, :1, :])


def test_cs_requires_dynamics():
    with pytest.raises(ValueError):
        render_state(coherent(0, 0), "CS", HG, grid=GRID)


def test_state_image_validates_shape(tmp_path):
    with pytest.raises(ValueError):
        StateImage(np.zeros((3, 10, 10), np.uint8), "PS")
    img = render_state(coherent(0, 2), "PS", HG, grid=GRID)
    write_png(img.pixels, tmp_path / "a.png")
    assert np.array_equal(read_png(tmp_path / "a.png"), img.pixels)


def test_box_mass_fraction_uniform_field():
    xs = np.linspace(0, 1, 101)
    ps = np.linspace(0, 1, 101)
    vals = np.ones((101, 101))
    assert box_mass_fraction(vals, xs, ps, (-1, 2, -1, 2)) == 1.0
    frac = box_mass_fraction(vals, xs, ps, (0.0, 0.095, 0.0, 0.995))
    assert abs(frac - 10 * 100 / 101**2) < 1e-12
    assert box_mass_fraction(5 * vals, xs, ps, (0.0, 0.095, 0.0, 0.995)) == frac


# ---------------------------------------------------------------- resonance state

@pytest.fixture(scope="module")
def resonance_state():
    pot = PotentialSpec(beta=0.005, cap_strength=0.5)
    drive = DriveParameters(F=0.02, omega=locate_resonance(pot, 3.0))
    grid = GridSpec(128, -12.0, 12.0, 1024)
    isl = find_island(pot, drive, window=8.0)
    states = floquet_states(one_period_propagator(pot, drive, grid), drive, grid, 10)
    hg = HusimiGrid((-10.0, 10.0), (-10.0, 10.0))

    def mass(s):
        q = husimi_values(s.amplitudes, grid, hg)
        return box_mass_fraction(q, hg.xs, hg.ps, isl.boxes[Phase.T0])

    best = max(states, key=mass)
    return pot, drive, grid, hg, isl, best


def test_resonance_ps_image_bright_pixels_on_island(resonance_state):
    pot, drive, grid, hg, isl, s = resonance_state
    for ph in PHASES:
        e = evolve_to_phase(s, pot, drive, grid, ph)
        img = render_state(e, "PS", hg, grid=grid)
        # Top decile of the intensity scale: the two brightest colormap segments
        # are monotone in R+G+B, so compare against the field directly.
        q = husimi_values(e.amplitudes, grid, hg)[::-1]
        rows, cols = np.nonzero(q >= 0.9 * q.max())
        assert img.pixels[:, rows, cols].astype(int).sum(axis=0).min() >= 480
        x, p = pixel_to_phase_space(rows, cols, hg)
        x_lo, x_hi, p_lo, p_hi = isl.boxes[ph]
        inside = (x >= x_lo) & (x <= x_hi) & (p >= p_lo) & (p <= p_hi)
        assert inside.mean() >= 0.5, ph


def test_resonance_centroid_tracks_classical_island(resonance_state):
    pot, drive, grid, hg, isl, s = resonance_state
    X, P = np.meshgrid(hg.xs, hg.ps)
    cents = {}
    for ph in (Phase.T0, Phase.THALF):
        q = husimi_values(evolve_to_phase(s, pot, drive, grid, ph).amplitudes, grid, hg)
        # Centroid of the island-dominated upper half of the distribution.
        w = np.where(q >= 0.5 * q.max(), q, 0.0)
        cents[ph] = np.array([(w * X).sum(), (w * P).sum()]) / w.sum()
    assert np.linalg.norm(cents[Phase.THALF] - cents[Phase.T0]) > 3.0
    assert np.linalg.norm(cents[Phase.THALF] - np.array(isl.centers[Phase.THALF])) < 1.0
