"""Tests for Wiener increments, mark measures and jump streams."""

from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from itoledger.drivers import (
    ConfigurationError,
    GridError,
    JumpEvent,
    JumpStream,
    MarkMeasure,
    TimeGrid,
    UnsupportedMeasureError,
    atoms,
    dirac,
    mark_integral,
    power_law,
    sample_drivers,
    sample_jumps,
    sample_wiener,
    uniform,
    write_stream_csv,
)


def test_uniform_grid_ends_exactly_at_horizon():
    grid = TimeGrid.uniform(0.7, 3)

    assert grid.points[0] == 0.0
    assert grid.points[-1] == 0.7
    assert grid.steps == pytest.approx([0.7 / 3] * 3)


def test_grid_rejects_zero_length_steps():
    with pytest.raises(GridError, match="zero-length"):
        TimeGrid(horizon=1.0, n_steps=2, points=np.array([0.0, 0.5, 0.5, 1.0]))


def test_grid_index_of_rejects_times_between_points():
    grid = TimeGrid.uniform(1.0, 4)

    assert grid.index_of(0.5) == 2
    with pytest.raises(GridError, match="not a grid point"):
        grid.index_of(0.3)


def test_wiener_components_are_shared_across_truncation_levels():
    grid = TimeGrid.uniform(1.0, 8)

    short = sample_wiener(grid, 2, seed=11)
    long = sample_wiener(grid, 5, seed=11)

    assert np.array_equal(short.increments, long.increments[:, :2])


def test_wiener_replicas_use_independent_streams():
    grid = TimeGrid.uniform(1.0, 8)

    first = sample_wiener(grid, 1, seed=3, replica=0)
    second = sample_wiener(grid, 1, seed=3, replica=1)

    assert not np.array_equal(first.increments, second.increments)


def test_wiener_requires_at_least_one_component():
    with pytest.raises(ConfigurationError, match="R >= 1"):
        sample_wiener(TimeGrid.uniform(1.0, 4), 0, seed=0)


def test_refined_increments_sum_back_to_the_coarse_increments():
    grid = TimeGrid.uniform(1.0, 4)
    wiener = sample_wiener(grid, 2, seed=5)
    points = np.union1d(grid.points, [0.1, 0.2, 0.6])

    fine = wiener.refined(points)

    assert fine.shape == (7, 2)
    merged = np.array([fine[0:3].sum(axis=0), fine[3], fine[4:6].sum(axis=0), fine[6]])
    assert merged == pytest.approx(np.array(wiener.increments), abs=1e-14)


def test_refined_requires_every_base_point():
    wiener = sample_wiener(TimeGrid.uniform(1.0, 4), 1, seed=0)

    with pytest.raises(GridError, match="every base grid point"):
        wiener.refined(np.array([0.0, 0.5, 1.0]))


def test_coarsened_increments_add_consecutive_steps():
    wiener = sample_wiener(TimeGrid.uniform(1.0, 8), 1, seed=2)

    coarse = wiener.coarsened(4)

    assert coarse.grid.n_steps == 2
    assert coarse.increments[:, 0] == pytest.approx(
        [wiener.increments[:4, 0].sum(), wiener.increments[4:, 0].sum()]
    )
    with pytest.raises(GridError, match="cannot coarsen"):
        wiener.coarsened(3)


def test_dirac_measure_integrates_analytically():
    estimate = mark_integral(dirac(2.0, mass=3.0), lambda z: z**2)

    assert estimate.method == "analytic"
    assert estimate.stderr == 0.0
    assert float(estimate.value) == 12.0


def test_atoms_measure_weights_each_point():
    estimate = mark_integral(atoms([0.5, 1.0], [1.0, 0.5]), lambda z: z)

    assert float(estimate.value) == pytest.approx(1.0)


def test_uniform_measure_falls_back_to_monte_carlo_with_stderr():
    estimate = mark_integral(uniform(0.0, 1.0, mass=2.0), lambda z: z, n_samples=20_000, seed=1)

    assert estimate.method == "monte-carlo"
    assert estimate.stderr > 0
    assert float(estimate.value) == pytest.approx(1.0, abs=5 * estimate.stderr)


def test_unit_uniform_measure_integrates_the_identity_to_one_half():
    estimate = mark_integral(uniform(0.0, 1.0), lambda z: z, n_samples=10_000, seed=4)

    assert estimate.method == "monte-carlo"
    assert float(estimate.value) == pytest.approx(0.5, abs=3 * estimate.stderr)


def test_power_law_monte_carlo_agrees_with_the_closed_form():
    estimate = mark_integral(power_law(0.5, 3), lambda z: z, n_samples=20_000, seed=5)

    # z * z^(-3/2) integrated over [1/8, 1)
    exact = 2.0 * (1.0 - 8.0**-0.5)
    assert estimate.method == "monte-carlo"
    assert float(estimate.value) == pytest.approx(exact, abs=4 * estimate.stderr)


def test_mark_integral_rejects_more_layers_than_available():
    with pytest.raises(ConfigurationError, match="layers"):
        mark_integral(power_law(0.5, 2), lambda z: z, n_layers=3)


def test_layer_without_sampler_or_integral_is_unsupported():
    measure = power_law(0.5, 1)
    bare = type(measure)(layers=(type(measure.layers[0])(mass=1.0),), name="bare")

    with pytest.raises(UnsupportedMeasureError, match="neither"):
        mark_integral(bare, lambda z: z)


def test_power_law_layers_are_dyadic_shells():
    measure = power_law(0.5, 3, scale=1.0)

    assert len(measure.layers) == 3
    rng = np.random.default_rng(0)
    for n, layer in enumerate(measure.layers):
        marks = layer.sampler(rng, 200)
        assert np.all(marks >= 2.0 ** -(n + 1))
        assert np.all(marks <= 2.0**-n)


def test_jump_stream_is_sorted_and_inside_horizon():
    stream = sample_jumps([dirac(1.0, mass=5.0), dirac(-1.0, mass=5.0)], 2.0, None, seed=4)

    times = stream.times
    assert np.all(np.diff(times) >= 0)
    assert np.all((times > 0) & (times <= 2.0))
    assert {event.measure for event in stream.events} <= {0, 1}


def test_adding_layers_keeps_existing_layer_events():
    measure = power_law(0.5, 4)

    two = sample_jumps(measure, 1.0, 2, seed=9)
    four = sample_jumps(measure, 1.0, 4, seed=9)

    assert four.restricted(2).events == two.events


def test_restricted_stream_keeps_warnings_of_the_kept_events():
    events = (
        JumpEvent(time=0.5, mark=1.0, measure=0, layer=0),
        JumpEvent(time=0.5, mark=0.3, measure=0, layer=1),
    )
    stream = JumpStream(events=events, horizon=1.0, warnings=("simultaneous",))

    both = stream.restricted(2)
    first = stream.restricted(1)

    assert len(both.warnings) == 1
    assert "t=0.5" in both.warnings[0]
    assert first.events == events[:1]
    assert first.warnings == ()


def test_sample_jumps_rejects_nonpositive_horizon():
    with pytest.raises(ConfigurationError, match="horizon"):
        sample_jumps(dirac(1.0), 0.0, None, seed=0)


def test_sample_drivers_without_measures_has_empty_stream():
    drivers = sample_drivers(TimeGrid.uniform(1.0, 4), 1, (), seed=0)

    assert drivers.jumps.events == ()
    assert drivers.wiener.increments.shape == (4, 1)


def test_same_seed_reproduces_drivers_bit_for_bit():
    grid = TimeGrid.uniform(1.0, 16)

    first = sample_drivers(grid, 2, (dirac(1.0, mass=4.0),), seed=21, replica=3)
    second = sample_drivers(grid, 2, (dirac(1.0, mass=4.0),), seed=21, replica=3)

    assert np.array_equal(first.wiener.increments, second.wiener.increments)
    assert first.jumps.events == second.jumps.events


def test_write_stream_csv_lists_every_event(tmp_path: Path):
    stream = sample_jumps(dirac(1.0, mass=6.0), 1.0, None, seed=1)

    target = write_stream_csv(stream, tmp_path / "stream.csv")

    lines = target.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "time,mark,measure_k,layer_n"
    assert len(lines) == len(stream.events) + 1


class TestJumpStreamStatistics:
    """Event counts, times and marks follow the measure they were drawn from."""

    def test_event_counts_match_the_total_mass(self):
        counts = [
            len(sample_jumps(uniform(0.0, 1.0, mass=2.0), 2.0, None, 8, replica=r).events)
            for r in range(400)
        ]

        expected = 400 * 2.0 * 2.0
        assert abs(sum(counts) - expected) <= 4.0 * np.sqrt(expected)

    def test_event_times_are_uniform_on_the_horizon(self):
        stream = sample_jumps(uniform(0.0, 1.0, mass=500.0), 3.0, None, 9)

        result = stats.kstest(stream.times / 3.0, "uniform")

        assert result.pvalue > 1e-3

    def test_shell_marks_follow_the_power_law(self):
        alpha = 0.5
        measure = power_law(alpha, 3)
        low, high = 2.0**-3, 2.0**-2
        layer = measure.layer_measure(2)
        marks = layer.layers[0].sampler(np.random.default_rng(10), 2000)

        def cdf(z):
            return (low**-alpha - z**-alpha) / (low**-alpha - high**-alpha)

        assert np.all((marks >= low) & (marks <= high))
        assert stats.kstest(marks, cdf).pvalue > 1e-3

    def test_dirac_measure_has_one_jump_per_unit_time_on_average(self):
        counts = np.array(
            [len(sample_jumps(dirac(1.0), 1.0, None, 7, replica=r).events) for r in range(100_000)]
        )

        assert counts.mean() == pytest.approx(1.0, abs=0.05)

    def test_layer_masses_add_up_in_the_expected_count(self):
        measure = MarkMeasure(
            layers=(uniform(0.0, 1.0, mass=2.0).layers[0], uniform(0.0, 1.0, mass=3.0).layers[0])
        )
        n = 10_000

        counts = np.array(
            [len(sample_jumps(measure, 2.0, None, 12, replica=r).events) for r in range(n)]
        )

        assert abs(counts.mean() - 10.0) <= 4.0 * np.sqrt(10.0 / n)

    def test_layer_counts_pass_a_poisson_goodness_of_fit(self):
        measure = power_law(0.5, 2)
        n = 10_000
        counts = np.zeros((n, 2), dtype=int)
        for r in range(n):
            for event in sample_jumps(measure, 1.0, None, 13, replica=r).events:
                counts[r, event.layer] += 1

        for layer in range(2):
            mean = measure.layers[layer].mass
            top = 1
            while n * stats.poisson.sf(top, mean) >= 5:
                top += 1
            observed = [np.sum(counts[:, layer] == k) for k in range(top)]
            observed.append(np.sum(counts[:, layer] >= top))
            expected = [n * stats.poisson.pmf(k, mean) for k in range(top)]
            expected.append(n * stats.poisson.sf(top - 1, mean))

            assert stats.chisquare(observed, expected).pvalue > 1e-3


class TestWienerIncrements:
    """Increments are independent centred normals with variance dt."""

    def test_unit_steps_have_zero_mean_and_unit_variance(self):
        n = 100_000
        increments = sample_wiener(TimeGrid.uniform(float(n), n), 1, seed=14).increments[:, 0]

        assert abs(increments.mean()) <= 4.0 / np.sqrt(n)
        assert increments.var() == pytest.approx(1.0, rel=0.05)

    def test_variance_scales_with_the_step(self):
        n = 100_000
        increments = sample_wiener(TimeGrid.uniform(n * 0.01, n), 1, seed=15).increments[:, 0]

        assert increments.var() == pytest.approx(0.01, abs=5 * 0.01 * np.sqrt(2.0 / n))
