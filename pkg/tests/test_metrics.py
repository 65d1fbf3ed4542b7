import numpy as np
import pytest

from hamlora.errors import InputError, StateError
from hamlora.metrics import AccuracyMatrix, average_accuracy, forgetting_measure
from hamlora.tensorops import RngState


def random_matrix(n, seed):
    rng = RngState(seed)
    m = AccuracyMatrix(n)
    for t in range(n):
        m.add_row(rng.random(t + 1))
    return m


class TestAccuracyMatrix:
    def test_rows_must_grow_by_one(self):
        m = AccuracyMatrix(3)
        m.add_row([0.5])
        with pytest.raises(InputError):
            m.add_row([0.5])

    def test_entries_bounded(self):
        m = AccuracyMatrix(2)
        with pytest.raises(InputError):
            m.add_row([1.5])

    def test_csv_header_and_blanks(self):
        m = AccuracyMatrix(3)
        m.add_row([1.0])
        m.add_row([0.5, 0.25])
        csv = m.to_csv()
        lines = csv.splitlines()
        assert lines[0] == "after_task,task_1,task_2,task_3"
        assert lines[1] == "1,1.0,,"
        assert lines[2] == "2,0.5,0.25,"


class TestAverageAccuracy:
    def test_all_ones(self):
        m = AccuracyMatrix(3)
        for t in range(3):
            m.add_row([1.0] * (t + 1))
        assert average_accuracy(m) == 1.0

    def test_two_entry_mean(self):
        m = AccuracyMatrix(2)
        m.add_row([0.9])
        m.add_row([0.4, 0.8])
        assert average_accuracy(m) == pytest.approx(0.6)

    def test_matches_naive_loop(self):
        m = random_matrix(6, seed=1)
        total = 0.0
        for i in range(6):
            total += m.rows[-1][i]
        assert average_accuracy(m) == pytest.approx(total / 6, abs=1e-15)

    def test_incomplete_matrix_raises(self):
        m = AccuracyMatrix(2)
        m.add_row([0.5])
        with pytest.raises(StateError):
            average_accuracy(m)

    def test_permutation_invariance_of_final_row(self):
        m = random_matrix(5, seed=2)
        permuted = AccuracyMatrix(5)
        for row in m.rows[:-1]:
            permuted.add_row(row)
        rng = RngState(3)
        permuted.add_row([m.rows[-1][i] for i in rng.permutation(5)])
        assert average_accuracy(permuted) == pytest.approx(average_accuracy(m), abs=1e-15)


class TestForgettingMeasure:
    def test_single_term_definition(self):
        m = AccuracyMatrix(2)
        m.add_row([0.9])
        m.add_row([0.7, 0.3])
        assert forgetting_measure(m) == pytest.approx(0.2, abs=1e-15)

    def test_non_decreasing_accuracies_give_nonpositive_fm(self):
        m = AccuracyMatrix(3)
        m.add_row([0.5])
        m.add_row([0.6, 0.4])
        m.add_row([0.7, 0.5, 0.9])
        assert forgetting_measure(m) <= 0.0

    def test_matches_brute_force_scan(self):
        m = random_matrix(7, seed=4)
        n = 7
        drops = []
        for i in range(n - 1):
            peak = -np.inf
            for t in range(i, n - 1):
                peak = max(peak, m.rows[t][i])
            drops.append(peak - m.rows[-1][i])
        assert abs(forgetting_measure(m) - np.mean(drops)) < 1e-12

    def test_single_task_raises(self):
        m = AccuracyMatrix(1)
        m.add_row([0.5])
        with pytest.raises(StateError):
            forgetting_measure(m)

    def test_translation_covariance(self):
        base = random_matrix(5, seed=6)
        shifted = AccuracyMatrix(5)
        for row in base.rows:
            shifted.add_row([a * 0.5 + 0.1 for a in row])
        # scaling each entry by 0.5 halves FM; adding 0.1 leaves it unchanged
        assert forgetting_measure(shifted) == pytest.approx(
            0.5 * forgetting_measure(base), abs=1e-12
        )
