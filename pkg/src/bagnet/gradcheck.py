"""Central finite-difference check of tape gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import OracleInvalidError


def finite_diff_check(
    evaluate: Callable[[], float],
    tensors: Sequence,
    indices: Sequence[tuple],
    analytic: Sequence[float],
    eps: float = 1e-3,
) -> float:
    """Largest relative error between ``analytic`` and central differences.

    ``evaluate`` is called with no arguments and must read the current values
    of ``tensors`` (arrays or objects with a ``.data`` array). Each entry of
    ``indices`` is ``(tensor_position, flat_index)``; the matching entry of
    ``analytic`` is the gradient to compare. Coordinates are perturbed in
    place and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if len(indices) != len(analytic):
        raise ValueError("indices and analytic must have the same length")
    base = evaluate()
    if evaluate() != base:
        raise OracleInvalidError("evaluate() returned different values for identical parameters")

    worst = 0.0
    for (pos, flat), a in zip(indices, analytic):
        target = tensors[pos]
        arr = (target if isinstance(target, np.ndarray) else target.data).reshape(-1)
        orig = arr[flat].copy()
        try:
            arr[flat] = orig + eps
            f_plus = evaluate()
            arr[flat] = orig - eps
            f_minus = evaluate()
        finally:
            arr[flat] = orig
        numeric = (f_plus - f_minus) / (2 * eps)
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst


def numeric_gradient(f: Callable[[float], float], theta: float, eps: float = 1e-3) -> float:
    """Scalar central difference, handy for one-dimensional sanity checks."""
    return (f(theta + eps) - f(theta - eps)) / (2 * eps)


@dataclass
class GradcheckResult:
    max_rel_error: float
    dtype: str
    eps: float
    coordinates: list
    analytic: list
    seconds: float
    points_tried: int = 1
    straddling_skipped: int = 0


def _structurally_zero(name: str, params, batch: int = 1) -> bool:
    """Parameters whose gradient vanishes by construction in train mode.

    * a conv bias feeding batch norm is cancelled by the mean subtraction;
    * with a single sample, a block whose multi-scale map is 1x1 produces
      attention maps that are one scalar each. That scalar rescales a map
      that goes through conv and batch norm, which is scale invariant up to
      the batch-norm epsilon, so the projection's true gradient is of order
      epsilon / variance: too small to resolve in relative terms at 32 bit.
    """
    layer_name, _, _ = name.rpartition(".")
    if name.endswith(".bias") and dict(params.layers())[layer_name].has_bn:
        return True
    parts = layer_name.split(".")
    if batch == 1 and parts[0] == "bgb" and parts[2] in ("proj_g", "proj_m"):
        k = int(parts[1])
        config = params.config
        d = config.scale_schedule[k]
        h, w = config.input_size
        if (h >> d, w >> d) == (1, 1):
            # out_m always feeds the next multi-scale conv; out_g feeds a conv unless this is the last block
            return parts[2] == "proj_g" or k < config.n_bgb - 1
    return False


def _oracle_dtype() -> np.dtype:
    # extended precision where the platform has it, so a tiny step is not lost to rounding
    ld = np.dtype(np.longdouble)
    return ld if np.finfo(ld).eps < np.finfo(np.float64).eps else np.dtype(np.float64)


def generic_params(config, seed: int, dtype=np.float64, scale: float = 0.1):
    """Initial parameters moved to a generic point.

    At initialisation every batch-norm shift is 0, and a batch-norm layer that
    sees a single value (a 1x1 map with batch 1) returns exactly that shift,
    so whole ReLU layers sit exactly on their kink and the loss is not
    differentiable there. Jittering the batch-norm affine terms and the conv
    biases by ``N(0, scale)`` moves away from those points.
    """
    from .model import init_params

    params = init_params(config, seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 1])
    for _, layer in params.layers():
        layer.bias.data = layer.bias.data + rng.normal(0.0, scale, layer.bias.shape)
        if layer.has_bn:
            layer.bn_gamma.data = layer.bn_gamma.data + rng.normal(0.0, scale, layer.bn_gamma.shape)
            layer.bn_beta.data = layer.bn_beta.data + rng.normal(0.0, scale, layer.bn_beta.shape)
    return params.astype(dtype)


def activation_pattern(tape) -> bytes:
    """Which piece of the piecewise-smooth network a forward pass landed on.

    Encodes the sign of every ReLU input and the winning element of every
    2x2 max-pool window recorded on ``tape``.
    """
    parts = []
    for node in tape.nodes:
        x = node.inputs[0].data if node.inputs else None
        if node.op == "relu":
            parts.append(np.packbits(x > 0).tobytes())
        elif node.op == "maxpool2":
            n, c, h, w = x.shape
            win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
            parts.append(np.argmax(win, axis=-1).astype(np.uint8).tobytes())
    return b"".join(parts)


def model_gradcheck(
    config=None,
    dtype=np.float64,
    n_coords: int = 20,
    seed: int = 0,
    eps: Optional[float] = None,
    batch: int = 1,
    max_points: int = 20,
) -> GradcheckResult:
    """Compare tape gradients of the full network's BCE loss with central differences.

    Analytic gradients are computed at ``dtype`` at a point from
    :func:`generic_params`. The finite-difference side evaluates the loss in
    extended precision (float64 if the platform has nothing wider) on an exact
    upcast of the same parameters and the same rounded image.

    The network is only piecewise smooth, so two screens keep the comparison
    well posed; neither looks at gradient values:

    * the point is accepted only if the ``dtype`` forward pass and the wide
      forward pass agree on every ReLU sign and max-pool winner (otherwise a
      new jitter is drawn, up to ``max_points`` times);
    * a coordinate is accepted only if perturbing it by ``+-eps`` leaves that
      pattern unchanged, i.e. the difference does not straddle a kink.

    Coordinates are drawn by picking a parameter tensor uniformly, then an
    element uniformly; parameters whose gradient vanishes by construction
    (see :func:`_structurally_zero`) are skipped.
    """
    from .model import TINY_CONFIG, bagnet_forward
    from .tensor import TRAIN, Tape, Tensor
    from .train import bce_loss

    started = time.perf_counter()
    config = config or TINY_CONFIG
    dtype = np.dtype(dtype)
    wide = _oracle_dtype()
    eps = eps if eps is not None else 1e-6
    rng = np.random.default_rng(seed)
    h, w = config.input_size
    image = rng.random((batch, config.input_channels, h, w)).astype(dtype)
    target = (rng.random((batch, 1, h, w)) < 0.3).astype(dtype)
    x_wide = Tensor(image.astype(wide))
    t_wide = target.astype(wide)

    for point in range(max_points):
        params = generic_params(config, seed + 7919 * point, dtype=dtype)
        with Tape() as tape:
            loss = bce_loss(bagnet_forward(Tensor(image), params, TRAIN), target)
        tape.backward(loss)
        oracle_params = params.astype(wide)
        with Tape() as wide_tape:
            bagnet_forward(x_wide, oracle_params, TRAIN)
        if activation_pattern(tape) == activation_pattern(wide_tape):
            break
    else:
        raise OracleInvalidError(
            f"no point among {max_points} where the {dtype} forward pass matches the wide one"
        )
    base_pattern = activation_pattern(wide_tape)

    oracle_tensors = oracle_params.tensors()

    def pattern_at(pos: int, flat: int, delta: float) -> bytes:
        arr = oracle_tensors[pos].data.reshape(-1)
        orig = arr[flat].copy()
        try:
            arr[flat] = orig + delta
            with Tape() as t:
                bagnet_forward(x_wide, oracle_params, TRAIN)
        finally:
            arr[flat] = orig
        return activation_pattern(t)

    named = params.named_tensors()
    eligible = [i for i, (name, _) in enumerate(named) if not _structurally_zero(name, params, batch)]
    coords, analytic, straddling = [], [], 0
    while len(coords) < n_coords:
        if straddling > 10 * n_coords:
            raise OracleInvalidError(f"{straddling} sampled coordinates straddle a kink at eps={eps}")
        pos = int(rng.choice(eligible))
        flat = int(rng.integers(named[pos][1].data.size))
        if pattern_at(pos, flat, eps) != base_pattern or pattern_at(pos, flat, -eps) != base_pattern:
            straddling += 1
            continue
        coords.append((pos, flat))
        analytic.append(float(named[pos][1].grad.reshape(-1)[flat]))

    def evaluate():
        return bce_loss(bagnet_forward(x_wide, oracle_params, TRAIN), t_wide).data.reshape(-1)[0]

    err = finite_diff_check(evaluate, oracle_tensors, coords, analytic, eps=eps)
    return GradcheckResult(
        max_rel_error=err,
        dtype=str(dtype),
        eps=eps,
        coordinates=[(named[p][0], f) for p, f in coords],
        analytic=analytic,
        seconds=time.perf_counter() - started,
        points_tried=point + 1,
        straddling_skipped=straddling,
    )
