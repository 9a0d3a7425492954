"""Ancestral sampling of label maps from a trained denoiser.

With stride k the chain visits steps T, T-k, ... and always finishes at
step 1, where the most probable label is taken instead of a sample. A hop
t -> s uses the posterior q(x_s | x_t, x_0) of the composed forward process.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ccdm.denoiser import Denoiser
from ccdm.diffusion import LabelMap, NoiseSchedule, mix_reverse_params, sample_categorical
from ccdm.metrics import fuse_probabilities

CHUNK = 64


@dataclass(frozen=True)
class SampleConfig:
    num_samples: int = 16
    stride: int = 1
    seed: int = 0
    use_polyak: bool = True

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def visited_steps(T: int, stride: int) -> list[int]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride > T:
        raise ValueError(f"stride {stride} exceeds T = {T}")
    steps = list(range(T, 0, -stride))
    if steps[-1] != 1:
        steps.append(1)
    return steps


def reverse_chain(model: Denoiser, params, schedule: NoiseSchedule, images: np.ndarray,
                  rngs: list[np.random.Generator], stride: int = 1):
    """Run one chain per generator; returns labels (N, H, W) and the final P0_hat (N, L, H, W)."""
    if params is None:
        raise ValueError("no trained parameters")
    L = model.num_classes
    n = len(rngs)
    h, w = images.shape[-2:]
    x = np.stack([rng.integers(1, L + 1, size=(h, w)) for rng in rngs])
    steps = visited_steps(schedule.T, stride)
    p0 = None
    for i, t in enumerate(steps):
        p0 = model.predict(params, x, images, np.full(n, t))
        if t > 1:
            probs = mix_reverse_params(np.moveaxis(p0, 1, -1), x, schedule, t, s=steps[i + 1])
            x = np.stack([sample_categorical(probs[k], rngs[k]) for k in range(n)])
        else:
            x = np.argmax(p0, axis=1) + 1
    return x, p0


def sample_one(model: Denoiser, params, image: np.ndarray, schedule: NoiseSchedule,
               stride: int, rng: np.random.Generator) -> LabelMap:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    labels, _ = reverse_chain(model, params, schedule, image[None], [rng], stride)
    return LabelMap(labels[0], model.num_classes)


def sample_many(model: Denoiser, params, image: np.ndarray, schedule: NoiseSchedule,
                num_samples: int, stride: int = 1, seed=0, return_probs: bool = False):
    """``num_samples`` independent chains, each with its own spawned RNG stream.

    Chains are evaluated in batches, which is equivalent to repeated
    :func:`sample_one` calls with the spawned generators.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(num_samples)]
    maps, probs = [], []
    for start in range(0, num_samples, CHUNK):
        chunk = rngs[start:start + CHUNK]
        images = np.broadcast_to(image, (len(chunk),) + image.shape)
        labels, p0 = reverse_chain(model, params, schedule, images, chunk, stride)
        maps += [LabelMap(lab, model.num_classes) for lab in labels]
        probs += list(p0)
    return (maps, probs) if return_probs else maps


def fuse_samples(prob_maps) -> LabelMap:
    """Average final-step probability maps and take the argmax per pixel."""
    return fuse_probabilities(prob_maps)
