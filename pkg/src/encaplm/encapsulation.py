"""Modular transforms with curvature-adaptive weighted aggregation.

A layer holds M independently parameterized module units whose outputs are
combined by a convex combination ``H = sum_m alpha_m H_m``.  The weights
live on the probability simplex and can be driven two ways: by gradient
descent (with clamp-and-renormalize projection after every step) or by a
softmax over negative curvature estimates -- modules whose scalarized map
has a larger Hessian Frobenius norm receive less weight.

Curvature is probed stochastically: ``||H||_F^2 = E_v ||H v||^2`` for
Rademacher probe vectors ``v``, with each Hessian-vector product taken as a
central difference of exact reverse-mode gradients.  Probe vectors come
from a counter-based generator keyed on (seed, probe index), so estimates
are reproducible and independent of evaluation order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, gradient, hvp, hvp_step, tensor

SIMPLEX_TOL = 1e-9
GRAD_NORM_FLOOR = 1e-12
LAPLACIAN_STEP = 1e-3
DEFAULT_COORD_SAMPLE = 64


@dataclass
class ModuleUnit:
    """One encapsulated transform: named parameters plus a tape-recorded
    forward map from (n, d) inputs to (n, d_out) outputs."""

    params: dict[str, Tensor]
    forward: Callable[[Tape, Tensor], Tensor]
    in_width: int | None = None
    name: str = ""


class EncapsulationLayer:
    """M module units, simplex weights alpha, temperature beta, and
    per-module Laplacian coefficients."""

    def __init__(self, modules: Sequence[ModuleUnit], alpha=None, beta: float = 1.0,
                 lambda_laplacian=0.0):
        modules = list(modules)
        if len(modules) < 1:
            raise ValueError("EncapsulationLayer requires at least one module")
        if beta < 0:
            raise ValueError(f"beta must be nonnegative, got {beta}")
        m = len(modules)
        if alpha is None:
            alpha_arr = np.full(m, 1.0 / m)
        elif isinstance(alpha, Tensor):
            alpha_arr = None
        else:
            alpha_arr = np.asarray(alpha, dtype=np.float64)
        if alpha_arr is not None:
            alpha = Tensor(alpha_arr, requires_grad=True)
        if alpha.data.shape != (m,):
            raise ShapeError(f"alpha must have shape ({m},), got {alpha.data.shape}")
        _check_simplex(alpha.data)
        lam = np.asarray(lambda_laplacian, dtype=np.float64)
        lam = np.full(m, float(lam)) if lam.ndim == 0 else lam
        if lam.shape != (m,) or (lam < 0).any():
            raise ValueError("lambda_laplacian must be a nonnegative scalar or length-M vector")
        self.modules = modules
        self.alpha = alpha
        self.beta = float(beta)
        self.lambda_laplacian = lam

    @property
    def module_count(self) -> int:
        return len(self.modules)


@dataclass
class CurvatureEstimate:
    """Per-module estimates of the scalarized map's Hessian Frobenius norm."""

    per_module: np.ndarray
    probes: int
    seed: int

    def __post_init__(self):
        self.per_module = np.asarray(self.per_module, dtype=np.float64)
        if not np.isfinite(self.per_module).all() or (self.per_module < 0).any():
            raise ValueError("curvature estimates must be nonnegative and finite")


def _check_simplex(alpha: np.ndarray) -> None:
    if (alpha < -SIMPLEX_TOL).any() or abs(alpha.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(
            f"alpha is off the simplex beyond tolerance {SIMPLEX_TOL}: {alpha.tolist()}"
        )


def module_forward(tape: Tape, layer: EncapsulationLayer, m: int, x: Tensor) -> Tensor:
    """Run module m on the active tape; validates index and input width."""
    if not (0 <= m < layer.module_count):
        raise IndexError(f"module index {m} out of range [0, {layer.module_count})")
    unit = layer.modules[m]
    if unit.in_width is not None and x.data.shape[-1] != unit.in_width:
        raise ShapeError(
            f"module {m} expects input width {unit.in_width}, got {x.data.shape[-1]}"
        )
    out = unit.forward(tape, x)
    if out.data.shape[0] != x.data.shape[0]:
        raise ShapeError(
            f"module {m} changed batch extent: {x.data.shape[0]} -> {out.data.shape[0]}"
        )
    return out


def weighted_sum(tape: Tape, alpha: Tensor, h_list: Sequence[Tensor]) -> Tensor:
    """Simplex-weighted combination ``sum_m alpha_m H_m``, differentiable in
    both the outputs and alpha."""
    if alpha.data.shape != (len(h_list),):
        raise ShapeError(f"alpha shape {alpha.data.shape} does not match {len(h_list)} outputs")
    shapes = {h.data.shape for h in h_list}
    if len(shapes) != 1:
        raise ShapeError(f"module outputs disagree in shape: {sorted(shapes)}")
    _check_simplex(alpha.data)
    out = tape.mul_scalar(h_list[0], tape.pick(alpha, 0))
    for m in range(1, len(h_list)):
        out = tape.add(out, tape.mul_scalar(h_list[m], tape.pick(alpha, m)))
    return out


def aggregate(tape: Tape, layer: EncapsulationLayer, h_list: Sequence[Tensor]) -> Tensor:
    """Convex combination of module outputs under the layer's alpha."""
    if len(h_list) != layer.module_count:
        raise ShapeError(f"expected {layer.module_count} module outputs, got {len(h_list)}")
    return weighted_sum(tape, layer.alpha, h_list)


def _scalarized(layer: EncapsulationLayer, m: int, rows: int, cols: int):
    """Sum-of-entries scalarization of module m over a flattened input."""

    def f(tape: Tape, flat: Tensor) -> Tensor:
        x = tape.reshape(flat, (rows, cols))
        return tape.sum_all(module_forward(tape, layer, m, x))

    return f


def input_gradient(layer: EncapsulationLayer, m: int, x: Tensor) -> np.ndarray:
    """Exact gradient of the scalarized module output w.r.t. the input."""
    rows, cols = x.data.shape
    g = gradient(_scalarized(layer, m, rows, cols), Tensor(x.data.reshape(-1)))
    return g.data.reshape(rows, cols)


def rademacher_probe(seed: int, index: int, size: int) -> np.ndarray:
    """+/-1 probe vector from a counter-based stream keyed on (seed, index)."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed) << np.uint64(16) ^ np.uint64(index)))
    return gen.integers(0, 2, size=size).astype(np.float64) * 2.0 - 1.0


def curvature_estimate(layer: EncapsulationLayer, x: Tensor, probes: int, seed: int,
                       probe_vectors: Sequence[np.ndarray] | None = None) -> CurvatureEstimate:
    """Hutchinson-style estimate of each module's Hessian Frobenius norm.

    The whole batch enters as one flattened input; for each probe v the
    squared HVP norm ``||H v||^2`` is averaged over K probes and rooted.
    ``probe_vectors`` overrides the Rademacher stream (for closed-form
    single-probe checks).
    """
    if probes < 1:
        raise ValueError(f"probes must be >= 1, got {probes}")
    rows, cols = x.data.shape
    flat = Tensor(x.data.reshape(-1))
    size = flat.data.size
    if probe_vectors is not None and len(probe_vectors) != probes:
        raise ValueError("probe_vectors length must equal probes")
    estimates = np.zeros(layer.module_count)
    for m in range(layer.module_count):
        f = _scalarized(layer, m, rows, cols)
        acc = 0.0
        for k in range(probes):
            v = (np.asarray(probe_vectors[k], dtype=np.float64) if probe_vectors is not None
                 else rademacher_probe(seed, k, size))
            hv = hvp(f, flat, Tensor(v))
            acc += float(hv.data @ hv.data)
        estimates[m] = np.sqrt(acc / probes)
    return CurvatureEstimate(per_module=estimates, probes=probes, seed=seed)


def curvature_weights(estimates, beta: float) -> np.ndarray:
    """Simplex weights ``softmax(-beta * estimate)``: flatter modules get more.

    beta = 0 gives the exact uniform vector; growing beta concentrates all
    weight on the lowest-curvature module.
    """
    est = estimates.per_module if isinstance(estimates, CurvatureEstimate) else np.asarray(
        estimates, dtype=np.float64)
    if not np.isfinite(est).all() or (est < 0).any():
        raise ValueError("estimates must be nonnegative and finite")
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    z = -beta * est
    w = np.exp(z - z.max())
    return w / w.sum()


def project_simplex(alpha: np.ndarray) -> np.ndarray:
    """Clamp negatives to zero, then renormalize to unit sum.

    All-nonpositive input degenerates: the result resets to uniform and a
    RuntimeWarning records the event.
    """
    a = np.asarray(alpha, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError("project_simplex requires finite input")
    clipped = np.maximum(a, 0.0)
    total = clipped.sum()
    if total <= 0.0:
        warnings.warn(
            "project_simplex: all entries nonpositive; resetting to uniform",
            RuntimeWarning,
            stacklevel=2,
        )
        return np.full(a.size, 1.0 / a.size)
    return clipped / total


def consensus_loss(tape: Tape, layer: EncapsulationLayer, x: Tensor, h: Tensor,
                   grad_penalty: float, h_list: Sequence[Tensor] | None = None) -> Tensor:
    """Pull every module toward the aggregate, plus a gradient-norm penalty.

    Value: ``sum_m ||H - f_m(X)||^2 + grad_penalty * sum_m ||grad_X s_m||_2``
    where ``s_m`` sums the module output.  The norm term is realized as a
    directional derivative along the (detached) normalized gradient so the
    whole expression stays on the tape and differentiates w.r.t. module
    parameters and alpha; at the evaluation point this matches the exact
    derivative of the norm.
    """
    if h_list is None:
        h_list = [module_forward(tape, layer, m, x) for m in range(layer.module_count)]
    total = None
    for hm in h_list:
        if hm.data.shape != h.data.shape:
            raise ShapeError(f"module output shape {hm.data.shape} != aggregate {h.data.shape}")
        diff = tape.add(h, tape.scale(hm, -1.0))
        term = tape.sum_all(tape.multiply(diff, diff))
        total = term if total is None else tape.add(total, term)
    if grad_penalty > 0.0:
        eps = hvp_step(x.data)
        for m in range(layer.module_count):
            g = input_gradient(layer, m, x)
            norm = float(np.linalg.norm(g))
            if norm < GRAD_NORM_FLOOR:
                continue
            u = g / norm
            plus = tape.sum_all(module_forward(tape, layer, m, Tensor(x.data + eps * u)))
            minus = tape.sum_all(module_forward(tape, layer, m, Tensor(x.data - eps * u)))
            directional = tape.scale(tape.add(plus, tape.scale(minus, -1.0)), 1.0 / (2.0 * eps))
            total = tape.add(total, tape.scale(directional, grad_penalty))
    return total


def laplacian_loss(tape: Tape, layer: EncapsulationLayer, x: Tensor,
                   coord_sample: int | None = None, seed: int = 0) -> Tensor:
    """Per-coordinate smoothness penalty coupling second and first input
    derivatives: ``sum_m sum_j (d2 s_m/dX_j^2 - lambda_m * d s_m/dX_j)^2``.

    Derivatives use on-tape central differences with step 1e-3, so the loss
    stays differentiable w.r.t. module parameters.  When the flattened input
    has more than ``coord_sample`` coordinates (default 64), a seeded sample
    is evaluated and the sum is rescaled to an unbiased estimate.
    """
    rows, cols = x.data.shape
    size = x.data.size
    cap = DEFAULT_COORD_SAMPLE if coord_sample is None else int(coord_sample)
    if size <= cap:
        coords = np.arange(size)
        scale_up = 1.0
    else:
        coords = np.sort(np.random.Generator(np.random.Philox(key=np.uint64(seed))).choice(
            size, size=cap, replace=False))
        scale_up = size / cap
    h = LAPLACIAN_STEP
    total = None
    for m in range(layer.module_count):
        lam = float(layer.lambda_laplacian[m])
        base = tape.sum_all(module_forward(tape, layer, m, Tensor(x.data)))
        mod_total = None
        for j in coords:
            shifted = x.data.reshape(-1).copy()
            shifted[j] += h
            plus = tape.sum_all(module_forward(tape, layer, m, Tensor(shifted.reshape(rows, cols))))
            shifted[j] -= 2 * h
            minus = tape.sum_all(module_forward(tape, layer, m, Tensor(shifted.reshape(rows, cols))))
            second = tape.scale(
                tape.add(tape.add(plus, minus), tape.scale(base, -2.0)), 1.0 / (h * h))
            first = tape.scale(tape.add(plus, tape.scale(minus, -1.0)), 1.0 / (2.0 * h))
            resid = tape.add(second, tape.scale(first, -lam))
            term = tape.multiply(resid, resid)
            mod_total = term if mod_total is None else tape.add(mod_total, term)
        if scale_up != 1.0:
            mod_total = tape.scale(mod_total, scale_up)
        total = mod_total if total is None else tape.add(total, mod_total)
    return total


def divergence_diagnostic(layer: EncapsulationLayer, x: Tensor) -> float:
    """Monte Carlo surrogate for the weighted-gradient alignment objective:
    the batch mean of ``||sum_m alpha_m grad_x s_m(x)||^2`` over input rows.

    Reported as a diagnostic; it is not a training signal by default.
    """
    if x.data.shape[0] == 0:
        raise ValueError("divergence_diagnostic: empty batch")
    combined = np.zeros_like(x.data)
    for m in range(layer.module_count):
        combined += layer.alpha.data[m] * input_gradient(layer, m, x)
    return float((combined**2).sum(axis=1).mean())
