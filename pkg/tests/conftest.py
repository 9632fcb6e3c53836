"""Shared oracles and fixtures.

The finite-difference helpers here are the independent check on the
reverse-mode engine: they only ever evaluate forward values, so they share
no differentiation code with the path under test.
"""

import numpy as np
import pytest

from encaplm.autodiff import Tape, Tensor


def tape_value(f, x: np.ndarray) -> float:
    """Evaluate a scalar tape function at a plain numpy point."""
    tape = Tape()
    out = f(tape, Tensor(np.array(x, dtype=np.float64), requires_grad=True))
    return out.item()


def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar tape function."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        delta = np.zeros_like(flat)
        delta[i] = h
        g[i] = (tape_value(f, (flat + delta).reshape(x.shape))
                - tape_value(f, (flat - delta).reshape(x.shape))) / (2.0 * h)
    return g.reshape(x.shape)


def random_net_fn(seed: int):
    """A random small net (1-3 layers, widths <= 8) as a scalar tape function
    of its flattened parameter vector, plus the packed initial point.

    Layer flavors rotate through plain affine, gelu, and layer_norm blocks so
    every backward rule gets exercised; the head is either a sum of squares
    or a cross-entropy against fixed targets.
    """
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    widths = [int(rng.integers(2, 9)) for _ in range(depth + 1)]
    n_rows = int(rng.integers(1, 4))
    x0 = rng.normal(size=(n_rows, widths[0]))
    kinds = [rng.choice(["affine", "gelu", "layer_norm"]) for _ in range(depth)]
    head = rng.choice(["square_sum", "cross_entropy"])
    targets = rng.integers(0, widths[-1], size=n_rows)

    sizes = []
    for k, kind in enumerate(kinds):
        sizes.append(widths[k] * widths[k + 1])  # weight
        sizes.append(widths[k + 1])              # bias
        if kind == "layer_norm":
            sizes.append(widths[k + 1])          # gain
            sizes.append(widths[k + 1])          # shift
    w0 = rng.normal(scale=0.5, size=sum(sizes))

    def f(tape: Tape, w: Tensor) -> Tensor:
        h = Tensor(x0)
        off = 0

        def take(n):
            nonlocal off
            part = tape.slice_cols(tape.reshape(w, (1, w.size)), off, off + n)
            off += n
            return part

        for k, kind in enumerate(kinds):
            din, dout = widths[k], widths[k + 1]
            weight = tape.reshape(take(din * dout), (din, dout))
            bias = tape.reshape(take(dout), (dout,))
            h = tape.add(tape.matmul(h, weight), bias)
            if kind == "gelu":
                h = tape.gelu(h)
            elif kind == "layer_norm":
                gain = tape.reshape(take(dout), (dout,))
                shift = tape.reshape(take(dout), (dout,))
                h = tape.layer_norm(h, gain, shift)
        if head == "cross_entropy":
            return tape.cross_entropy_mean(h, targets)
        return tape.sum_all(tape.multiply(h, h))

    return f, w0


# -- acceptance criteria reporting -------------------------------------------

_acceptance_results = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(num, desc): marks a test as one acceptance criterion"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and rep.when == "call":
        _acceptance_results[marker.args[0]] = (marker.args[1], rep.outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(_acceptance_results):
        desc, outcome = _acceptance_results[num]
        label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome)
        terminalreporter.write_line(f"criterion {num:2d} [{label}] {desc}")
