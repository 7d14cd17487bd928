"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import backward

# gradients below this magnitude are compared on an absolute scale
REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=REL_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


class ReplayTape:
    """Graph facts recorded on one pass and checked or replayed on later ones.

    Backprop treats every stop-gradient output as a constant, so a central
    difference only agrees with it when those outputs are held at their
    base-point values while the inputs are perturbed.  The tape also records
    the discrete branches of piecewise ops (PReLU signs, gathered rows,
    routing indices, loss clamping); a perturbation that changes one has
    stepped across a non-differentiable point and ``crossed`` is set.
    """

    def __init__(self):
        self.values = []
        self.patterns = []
        self.recording = True
        self.crossed = False
        self._v = self._p = 0

    def rewind(self):
        self.recording = False
        self.crossed = False
        self._v = self._p = 0

    def replay(self, value, offset=None, exact=None):
        if self.recording:
            self.values.append(np.array(value, dtype=np.float64, copy=True))
            return np.array(value if exact is None else exact, dtype=np.float64, copy=True)
        if self._v >= len(self.values):
            raise RuntimeError("graph used more stop-gradients than were recorded")
        const = self.values[self._v]
        self._v += 1
        return const.copy() if offset is None else offset + const

    def branch(self, pattern):
        if self.recording:
            self.patterns.append(np.array(pattern, copy=True))
            return
        if self._p >= len(self.patterns) or not np.array_equal(self.patterns[self._p], pattern):
            self.crossed = True
        self._p += 1


@contextlib.contextmanager
def frozen_stops():
    """Install a :class:`ReplayTape` for the duration of the block."""
    if ops._stop_tape is not None:
        raise RuntimeError("frozen_stops blocks do not nest")
    tape = ReplayTape()
    ops._stop_tape = tape
    try:
        yield tape
    finally:
        ops._stop_tape = None


def numeric_grad(fn, tensor, eps=1e-5, coords=None):
    """``(f(x + eps) - f(x - eps)) / (2 eps)`` per coordinate of ``tensor``."""
    flat = tensor.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = {}
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out


@dataclass
class GradCheckReport:
    worst: float  # max relative error over compared coordinates
    compared: int
    skipped: int  # coordinates whose perturbation crossed a branch


def _coords(n, max_coords, rng):
    if max_coords is not None and n > max_coords:
        return rng.choice(n, size=max_coords, replace=False)
    return range(n)


def grad_check_report(fn, inputs, eps=1e-5, max_coords=None, rng=None, floor=REL_FLOOR, freeze_stops=False):
    """Compare backprop with central differences, coordinate by coordinate.

    ``fn`` rebuilds the graph from ``inputs`` (tensors with ``requires_grad``)
    and returns a scalar.  ``max_coords`` subsamples coordinates per input.
    With ``freeze_stops`` every stop-gradient output keeps its base-point
    value during the perturbed evaluations and coordinates whose
    perturbation flips a discrete branch are skipped (see :class:`ReplayTape`).
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    with frozen_stops() if freeze_stops else contextlib.nullcontext() as tape:
        backward(fn())
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
        worst, compared, skipped = 0.0, 0, 0
        for t, ga in zip(inputs, analytic):
            flat, gflat = t.data.reshape(-1), ga.reshape(-1)
            for i in _coords(flat.size, max_coords, rng):
                orig = flat[i]
                values, crossed = [], False
                for x in (orig + eps, orig - eps):
                    flat[i] = x
                    if tape is not None:
                        tape.rewind()
                    values.append(float(fn().data))
                    crossed = crossed or (tape is not None and tape.crossed)
                flat[i] = orig
                if crossed:
                    skipped += 1
                    continue
                numeric = (values[0] - values[1]) / (2.0 * eps)
                worst = max(worst, float(relative_error(gflat[i], numeric, floor)))
                compared += 1
    return GradCheckReport(worst, compared, skipped)


def finite_diff_check(fn, inputs, eps=1e-5, max_coords=None, rng=None, floor=REL_FLOOR, freeze_stops=False):
    """Worst relative error between backprop and central differences."""
    return grad_check_report(fn, inputs, eps, max_coords, rng, floor, freeze_stops).worst
