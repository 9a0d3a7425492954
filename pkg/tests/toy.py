"""Seed-pinned toy training run shared by the test modules."""

import numpy as np

from ccdm.data import TWO_MODE, exact_gt_distribution, generate_dataset
from ccdm.denoiser import DenoiserConfig
from ccdm.metrics import distance_matrix, ged
from ccdm.sampler import sample_many
from ccdm.trainer import TrainConfig, train

TRAIN_SIZE = 256
SNAPSHOT_EPOCHS = (1, 5, 20, 80, 300)


def train_toy(seed=0, snapshots=False):
    """Returns (state, {epoch: shadow params}) for the two-mode preset."""
    data = generate_dataset(TWO_MODE, TRAIN_SIZE, seed)
    saved = {}

    def keep(state):
        if state.epoch in SNAPSHOT_EPOCHS:
            saved[state.epoch] = {k: v.copy() for k, v in state.shadow.items()}

    state = train(data, TrainConfig(seed=seed), DenoiserConfig(),
                  on_epoch=keep if snapshots else None)
    return state, saved


def held_out(count, seed=1000):
    return generate_dataset(TWO_MODE, count, seed)


def recovery_scores(state, examples, n=100, stride=1):
    """Per image: (GED_n against the exact distribution, frequency of the first support map)."""
    out = []
    params = state.eval_params()
    for i, ex in enumerate(examples):
        samples = sample_many(state.model, params, ex.image, state.schedule, n, stride=stride, seed=i)
        support, weights = exact_gt_distribution(ex)
        nearest = distance_matrix(samples, support).argmin(axis=1)
        out.append((ged(samples, support, gt_weights=weights), float(np.mean(nearest == 0))))
    return out
