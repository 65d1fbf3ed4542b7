"""Continual-learning metrics over the accuracy matrix.

Row t of the matrix holds the accuracy on every task seen so far, measured
through the merged model after finishing task t, so the matrix is lower
triangular. Average accuracy reads the final row; the forgetting measure
compares each task's pre-final peak against its final accuracy.
"""

from __future__ import annotations

from .errors import InputError, StateError


class AccuracyMatrix:
    """Lower-triangular accuracy record: entry (t, i) is the accuracy on
    task i after training task t (0-indexed, i <= t)."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise InputError("num_tasks must be >= 1")
        self.num_tasks = num_tasks
        self.rows: list[list[float]] = []

    def add_row(self, accuracies) -> None:
        accuracies = [float(a) for a in accuracies]
        t = len(self.rows)
        if t >= self.num_tasks:
            raise StateError("matrix already complete")
        if len(accuracies) != t + 1:
            raise InputError(f"row {t} needs {t + 1} entries, got {len(accuracies)}")
        for a in accuracies:
            if not 0.0 <= a <= 1.0:
                raise InputError(f"accuracy {a} outside [0, 1]")
        self.rows.append(accuracies)

    @property
    def complete(self) -> bool:
        return len(self.rows) == self.num_tasks

    def value(self, t: int, i: int) -> float:
        return self.rows[t][i]

    def to_csv(self) -> str:
        header = "after_task," + ",".join(f"task_{i + 1}" for i in range(self.num_tasks))
        lines = [header]
        for t, row in enumerate(self.rows):
            cells = [repr(a) for a in row] + [""] * (self.num_tasks - len(row))
            lines.append(f"{t + 1}," + ",".join(cells))
        return "\n".join(lines) + "\n"


def average_accuracy(m: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks in the final row."""
    if not m.complete:
        raise StateError("final row is incomplete")
    final = m.rows[-1]
    return sum(final) / len(final)


def forgetting_measure(m: AccuracyMatrix) -> float:
    """Mean drop from each task's pre-final peak to its final accuracy.

    The peak for task i is taken over rows i..N-2 (the final row excluded)
    and the last task is excluded from the average; negative values mean
    backward transfer.
    """
    if not m.complete:
        raise StateError("final row is incomplete")
    n = m.num_tasks
    if n < 2:
        raise StateError("forgetting needs at least two tasks")
    final = m.rows[-1]
    drops = []
    for i in range(n - 1):
        peak = max(m.rows[t][i] for t in range(i, n - 1))
        drops.append(peak - final[i])
    return sum(drops) / len(drops)
