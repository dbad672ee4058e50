"""Central finite-difference check of the analytic scene gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BBox, ObjectHypothesis, Scene
from .model import ModelConfig, bce_loss, forward_inputs, init_params, loss_and_grads, scene_inputs

STEP = 1e-4


def random_scene(rng: np.random.Generator, n: int, config: ModelConfig, labeled_tasks=None) -> Scene:
    objects = []
    for _ in range(n):
        w, h = rng.uniform(5, 60, size=2)
        x, y = rng.uniform(0, 100 - w), rng.uniform(0, 100 - h)
        objects.append(
            ObjectHypothesis(
                bbox=BBox(float(x), float(y), float(w), float(h)),
                detection_score=float(rng.uniform(0.1, 1.0)),
                category=int(rng.integers(config.K)),
                feature=rng.normal(size=config.F),
            )
        )
    tasks = labeled_tasks or range(1, config.M + 1)
    labels = {t: rng.integers(0, 2, size=n).astype(np.int8) for t in tasks}
    return Scene("gradcheck", 100, 100, tuple(objects), labels)


def random_params(config: ModelConfig, rng: np.random.Generator):
    params = init_params(config, rng)
    # Nonzero biases exercise every bias path.
    for name, value in params.items():
        if value.ndim == 1:
            params[name] = rng.normal(scale=0.1, size=value.shape)
    return params


def numeric_grad(scene, params, config, name: str, step: float = STEP) -> np.ndarray:
    """Central differences with a step of ``step * max(1, |theta|)`` per element."""
    inputs = scene_inputs(scene, config)

    def loss():
        return bce_loss(forward_inputs(inputs, params, config)[0], scene.labels, config)[0]

    value = params[name]
    out = np.zeros_like(value)
    for idx in np.ndindex(value.shape):
        orig = value[idx]
        eps = step * max(1.0, abs(orig))
        value[idx] = orig + eps
        plus = loss()
        value[idx] = orig - eps
        minus = loss()
        value[idx] = orig
        out[idx] = (plus - minus) / (2.0 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps gradients that are zero up to finite-difference noise
    from dominating the ratio.
    """
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class GradcheckResult:
    max_rel_err: float
    per_param: dict[str, float]
    instances: int


def gradcheck(seed: int = 0, instances: int = 20, n_max: int = 5, F: int = 8, H: int = 8,
              T: int = 3, M: int = 2, K: int = 4, readout_hidden: int = 8,
              **flags) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        config = ModelConfig(K=K, F=F, M=M, H=H, T=T, readout_hidden=readout_hidden, **flags)
        params = random_params(config, rng)
        scene = random_scene(rng, int(rng.integers(1, n_max + 1)), config)
        _, _, grads = loss_and_grads(scene, params, config)
        for name in params:
            err = relative_error(grads[name], numeric_grad(scene, params, config, name))
            worst[name] = max(worst.get(name, 0.0), err)
    return GradcheckResult(max(worst.values()), worst, instances)
