"""Single-bias trojan: sink-class analysis, epsilon selection and injection.

Intended for red-team validation of the Merkle defense.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .checkpoint import Checkpoint, Dataset
from .nn import forward


@dataclass(frozen=True)
class AttackSpec:
    """Subtract ``epsilon`` from bias ``unit`` of ``layer`` (default: output layer).

    ``max_accuracy_drop`` is the tolerated loss in accuracy; it is checked
    after the attack, not used to bound epsilon.
    """

    unit: int
    epsilon: float
    layer: int = -1
    max_accuracy_drop: float = 1.0

    def __post_init__(self) -> None:
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and non-negative, got {self.epsilon}")
        if not 0.0 <= self.max_accuracy_drop <= 1.0:
            raise ValueError("max_accuracy_drop must lie in [0, 1]")

    def resolve(self, model: Checkpoint) -> tuple[int, int]:
        n = len(model.layers)
        layer = self.layer + n if self.layer < 0 else self.layer
        if not 0 <= layer < n:
            raise ValueError(f"layer {self.layer} out of range for {n} layers")
        if not 0 <= self.unit < model.layers[layer].out_dim:
            raise ValueError(f"unit {self.unit} out of range for layer {layer}")
        return layer, self.unit


@dataclass(frozen=True)
class AttackReport:
    sink_class: int
    layer: int
    epsilon_used: float
    max_accuracy_drop: float
    baseline_accuracy: Optional[float] = None
    trojaned_accuracy: Optional[float] = None
    sink_rate_before: Optional[float] = None
    sink_rate_after: Optional[float] = None
    samples: Optional[int] = None

    @property
    def accuracy_drop(self) -> Optional[float]:
        if self.baseline_accuracy is None or self.trojaned_accuracy is None:
            return None
        # Round through the sample count so the drop is an exact count ratio.
        lost = round((self.baseline_accuracy - self.trojaned_accuracy) * self.samples)
        return lost / self.samples

    @property
    def budget_exceeded(self) -> bool:
        drop = self.accuracy_drop
        return drop is not None and drop > self.max_accuracy_drop

    def to_dict(self) -> dict:
        out = asdict(self)
        out["accuracy_drop"] = self.accuracy_drop
        out["budget_exceeded"] = self.budget_exceeded
        return out


def _layer_index(model: Checkpoint, layer: int) -> int:
    n = len(model.layers)
    idx = layer + n if layer < 0 else layer
    if not 0 <= idx < n:
        raise ValueError(f"layer {layer} out of range for {n} layers")
    return idx


def sink_class(model: Checkpoint, layer: int, unit: int) -> int:
    """Class driven by a single neuron when everything else is silent.

    The chosen neuron's activation is set to 1 with every other activation
    in its layer at 0; the signal then flows through the remaining layers
    with biases omitted (output neurons start from 0) and ReLU on hidden
    layers. Ties, including an all-zero output, go to the lowest class.
    """
    layer = _layer_index(model, layer)
    width = model.layers[layer].out_dim
    if not 0 <= unit < width:
        raise ValueError(f"unit {unit} out of range for layer {layer} ({width} units)")
    h = np.zeros(width, dtype=np.float64)
    h[unit] = 1.0
    last = len(model.layers) - 1
    for i in range(layer + 1, last + 1):
        h = model.layers[i].weights.astype(np.float64) @ h
        if i < last:
            h = np.maximum(h, 0.0)
    return int(np.argmax(h))


def _pre_activations(model: Checkpoint, layer: int, images: np.ndarray) -> np.ndarray:
    if layer == len(model.layers) - 1:
        return forward(model, images)
    prefix = Checkpoint(model.layers[: layer + 1])
    # forward() leaves the final layer un-rectified, which is what we want here.
    return forward(prefix, images)


def choose_epsilon(model: Checkpoint, data: Dataset, layer: int = -1, unit: int = 0) -> float:
    """``(max - min) + 1`` over every pre-activation of ``layer`` on ``data``.

    For the output layer this pushes the attacked logit strictly below every
    other logit on each calibration input.
    """
    if len(data) == 0:
        raise ValueError("calibration set is empty")
    layer = _layer_index(model, layer)
    if not 0 <= unit < model.layers[layer].out_dim:
        raise ValueError(f"unit {unit} out of range for layer {layer}")
    z = _pre_activations(model, layer, data.images)
    return float(np.float64(z.max()) - np.float64(z.min())) + 1.0


def inject_single_bias(model: Checkpoint, spec: AttackSpec) -> Checkpoint:
    """Return a copy of ``model`` with one bias decreased by ``spec.epsilon``."""
    layer, unit = spec.resolve(model)
    if spec.epsilon == 0:
        return model
    old = model.layers[layer].biases[unit]
    new = np.float32(np.float64(old) - spec.epsilon)
    return model.with_bias(layer, unit, new)


def attack_and_measure(
    model: Checkpoint, spec: AttackSpec, data: Optional[Dataset] = None
) -> tuple[Checkpoint, AttackReport]:
    """Inject ``spec`` and, if ``data`` is given, measure before/after metrics."""
    layer, unit = spec.resolve(model)
    trojaned = inject_single_bias(model, spec)
    report = AttackReport(
        sink_class=unit,
        layer=layer,
        epsilon_used=float(spec.epsilon),
        max_accuracy_drop=spec.max_accuracy_drop,
    )
    if data is None:
        return trojaned, report
    if len(data) == 0:
        raise ValueError("evaluation set is empty")
    before = np.argmax(forward(model, data.images), axis=1)
    after = np.argmax(forward(trojaned, data.images), axis=1)
    k = sink_class(model, layer, unit)
    report = AttackReport(
        sink_class=k,
        layer=layer,
        epsilon_used=float(spec.epsilon),
        max_accuracy_drop=spec.max_accuracy_drop,
        baseline_accuracy=float(np.mean(before == data.labels)),
        trojaned_accuracy=float(np.mean(after == data.labels)),
        sink_rate_before=float(np.mean(before == k)),
        sink_rate_after=float(np.mean(after == k)),
        samples=len(data),
    )
    return trojaned, report


def run_attack_experiment(
    model: Checkpoint, data_test: Dataset, k: int, max_accuracy_drop: float = 1.0
) -> AttackReport:
    """Suppress output class ``k`` with an epsilon calibrated on ``data_test``."""
    n_out = model.layers[-1].out_dim
    if not 0 <= k < n_out:
        raise ValueError(f"sink class {k} out of range for {n_out} outputs")
    eps = choose_epsilon(model, data_test, -1, k)
    spec = AttackSpec(unit=k, epsilon=eps, max_accuracy_drop=max_accuracy_drop)
    _, report = attack_and_measure(model, spec, data_test)
    return report
