"""Server-side class-wise logit maximization.

A probe freezes a model, starts from one image per class, and runs Adam
ascent on s_c(x) - reg*||x||^2 for every class at once (rows of one batch).
The final optimized logits are the per-class evidence scores; the final
images warm-start the next round's probe.
"""

from dataclasses import dataclass

import numpy as np

from .nn import AdamState, MlpModel, adam_step, class_objective_and_input_grad, forward

DIVERGENCE_LIMIT = 1e12


class ProbeDivergenceError(RuntimeError):
    """A class probe produced a non-finite or runaway objective."""


@dataclass
class ProbeConfig:
    steps: int = 200
    lm_learning_rate: float = 0.01
    reg_weight: float = 0.001

    def __post_init__(self):
        if self.steps < 0 or self.lm_learning_rate <= 0 or self.reg_weight < 0:
            raise ValueError("need steps >= 0, lm_learning_rate > 0, reg_weight >= 0")


@dataclass
class ProbeResult:
    scores: np.ndarray        # [K] final optimized logits, one per class
    final_images: np.ndarray  # [K, d]


@dataclass
class ProbeBank:
    """Warm-start images, one [K, d] block per model slot.

    Slot 0 is the global model; slots 1..N are the clients. Images start as
    standard Gaussian noise and are overwritten with each round's final
    probe images.
    """

    images: np.ndarray  # [slots, K, d]

    @classmethod
    def gaussian(cls, slots: int, num_classes: int, dim: int, rng: np.random.Generator) -> "ProbeBank":
        return cls(rng.standard_normal((slots, num_classes, dim)))

    @property
    def n_slots(self) -> int:
        return self.images.shape[0]


def _check_divergence(objective: np.ndarray, step: int) -> None:
    bad = ~np.isfinite(objective)
    if bad.any() or (objective > DIVERGENCE_LIMIT).any():
        cls = int(np.argmax(np.where(bad, np.inf, objective))) + 1
        raise ProbeDivergenceError(f"probe for class {cls} diverged at step {step}")


def lm_probe(model: MlpModel, init_images: np.ndarray, cfg: ProbeConfig) -> ProbeResult:
    """Run cfg.steps Adam ascent steps per class; the model is never mutated.

    init_images is [K, d] with K = model.output_dim; row c-1 seeds class c.
    Fresh Adam moments every call: warm-started images belong to the slot,
    moments tied to a stale model do not.
    """
    k = model.output_dim
    x = np.array(init_images, dtype=np.float64)
    if x.shape != (k, model.input_dim):
        raise ValueError(f"init_images shape {x.shape} != ({k}, {model.input_dim})")
    classes = np.arange(1, k + 1)
    adam = AdamState.like(x, cfg.lm_learning_rate)
    for step in range(cfg.steps):
        objective, grad = class_objective_and_input_grad(model, x, classes, cfg.reg_weight)
        _check_divergence(objective, step)
        x = adam_step(adam, x, grad)
    logits = forward(model, x)
    scores = logits[np.arange(k), classes - 1]
    _check_divergence(scores, cfg.steps)
    return ProbeResult(scores=scores, final_images=x)


def probe_objective(model: MlpModel, images: np.ndarray, reg_weight: float) -> np.ndarray:
    """Per-class value of s_c(x_c) - reg*||x_c||^2 for a [K, d] image block."""
    objective, _ = class_objective_and_input_grad(
        model, images, np.arange(1, model.output_dim + 1), reg_weight
    )
    return objective


def global_baseline(result_global: ProbeResult) -> float:
    """Mean optimized logit of the global model: the shared-calibration bias."""
    return float(np.mean(result_global.scores))


def write_pgm(values: np.ndarray, path) -> None:
    """8-bit binary PGM with per-image min-max normalization."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("write_pgm expects a 2-D array")
    lo, hi = values.min(), values.max()
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5 {values.shape[1]} {values.shape[0]} 255\n".encode("ascii"))
        f.write(pixels.tobytes())


def export_probe_images(images: np.ndarray, out_dir, prefix: str,
                        image_shape: tuple[int, int] | None = None) -> list[str]:
    """Dump a [K, d] image block as one PGM per class; returns written paths."""
    import os

    k, d = images.shape
    shape = image_shape or (1, d)
    if shape[0] * shape[1] != d:
        raise ValueError(f"image_shape {shape} incompatible with dim {d}")
    paths = []
    for c in range(k):
        path = os.path.join(out_dir, f"{prefix}_class_{c + 1}.pgm")
        write_pgm(images[c].reshape(shape), path)
        paths.append(path)
    return paths
