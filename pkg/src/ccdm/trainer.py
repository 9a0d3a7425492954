"""ELBO training of the denoiser with Adam and Polyak parameter averaging."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ccdm import tensor as tn
from ccdm.checkpoint import load_checkpoint, save_checkpoint
from ccdm.data import AnnotatedExample
from ccdm.denoiser import DenoiserConfig, ToyUNet
from ccdm.diffusion import (NoiseSchedule, cosine_schedule, one_hot, posterior_matrix,
                            posterior_params, prior_kl, sample_xt)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    T: int = 50
    epochs: int = 300
    batch_size: int = 16
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    lr_decay: str = "linear"
    lr_power: float = 0.9
    polyak_alpha: float = 0.999
    seed: int = 0
    hflip: bool = False
    log_every: int = 10
    checkpoint_every: int = 0
    val_every: int = 0
    val_samples: int = 16
    patience: int | None = None

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must not exceed lr_start")
        if self.lr_decay not in ("linear", "polynomial"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if not 0.0 <= self.polyak_alpha < 1.0:
            raise ValueError("polyak_alpha must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "toy": TrainConfig(),
    "paper-lidc": TrainConfig(T=250, epochs=100, batch_size=64, lr_start=1e-4, lr_end=1e-6,
                              lr_decay="polynomial", polyak_alpha=0.99995),
}


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return config.lr_start
    frac = min(step / (total_steps - 1), 1.0)
    if config.lr_decay == "linear":
        return config.lr_start + (config.lr_end - config.lr_start) * frac
    return config.lr_end + (config.lr_start - config.lr_end) * (1.0 - frac) ** config.lr_power


@dataclass
class TrainState:
    model: ToyUNet
    schedule: NoiseSchedule
    params: dict[str, tn.Tensor]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    shadow: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    history: list[tuple[int, str, float, float]] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    config: TrainConfig | None = None

    @classmethod
    def initial(cls, model: ToyUNet, schedule: NoiseSchedule, seed: int = 0,
                config: TrainConfig | None = None) -> "TrainState":
        params = model.init_params(np.random.default_rng([seed, 0xC0DE]))
        zeros = {k: np.zeros(p.shape) for k, p in params.items()}
        return cls(model, schedule, params,
                   adam_m={k: v.copy() for k, v in zeros.items()},
                   adam_v={k: v.copy() for k, v in zeros.items()},
                   shadow={k: p.data.copy() for k, p in params.items()},
                   config=config)

    def eval_params(self, use_polyak: bool = True) -> dict[str, tn.Tensor]:
        if use_polyak:
            return {k: tn.Tensor(v) for k, v in self.shadow.items()}
        return self.params

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def save(self, path) -> None:
        tensors: dict[str, np.ndarray] = {}
        for k, p in self.params.items():
            tensors[f"param/{k}"] = p.data
        for group, store in (("shadow", self.shadow), ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            for k, v in store.items():
                tensors[f"{group}/{k}"] = v
        meta = {
            "model": self.model.config.to_dict(),
            "T": self.schedule.T,
            "betas": self.schedule.beta[1:].tolist(),
            "step": self.step,
            "epoch": self.epoch,
            "epoch_losses": self.epoch_losses,
            "num_params": self.num_params(),
            "train": self.config.to_dict() if self.config else None,
        }
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "TrainState":
        tensors, meta = load_checkpoint(path)
        model = ToyUNet(DenoiserConfig.from_dict(meta["model"]))
        schedule = NoiseSchedule.from_betas(meta["betas"])
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "shadow": {}, "adam_m": {}, "adam_v": {}}
        for name, arr in tensors.items():
            group, key = name.split("/", 1)
            groups[group][key] = arr
        expected = model.param_shapes()
        if {k: v.shape for k, v in groups["param"].items()} != expected:
            raise ValueError(f"{path}: checkpoint parameters do not match the model config")
        params = {k: tn.Tensor(v, requires_grad=True, name=k) for k, v in groups["param"].items()}
        config = TrainConfig.from_dict(meta["train"]) if meta.get("train") else None
        return cls(model, schedule, params, groups["adam_m"], groups["adam_v"], groups["shadow"],
                   step=meta["step"], epoch=meta["epoch"],
                   epoch_losses=list(meta.get("epoch_losses", [])), config=config)


# -- loss ------------------------------------------------------------------------


def elementwise_loss(model: ToyUNet, params, schedule: NoiseSchedule, x0: np.ndarray,
                     images: np.ndarray, t: np.ndarray, rng: np.random.Generator,
                     x_t: np.ndarray | None = None) -> tn.Tensor:
    """Per-example loss (N,): pixel-summed KL for t > 1, negative log-likelihood for t = 1.

    Both branches share one form, ``sum_x q log(q / p)``: at t = 1 the target q
    is one-hot at x_0 and p is P0_hat itself. ``x_t`` is drawn from
    q(x_t | x_0) unless supplied.
    """
    L = model.num_classes
    t = np.asarray(t)
    tb = t[:, None, None]
    if x_t is None:
        x_t = sample_xt(x0, schedule, tb, rng, L)
    onehot_t = np.moveaxis(one_hot(x_t, L), -1, 1)
    p0 = model.forward(params, onehot_t, images, t)

    t_safe = np.maximum(tb, 2)
    first = (tb == 1)[..., None]
    q = np.where(first, one_hot(x0, L), posterior_params(x_t, x0, schedule, t_safe, L))
    mix = posterior_matrix(x_t, schedule, t_safe, L)  # (N, H, W, x0, x)
    mix = np.where(first[..., None], np.eye(L), mix)

    n, h, w = x0.shape
    mix_t = tn.Tensor(mix.transpose(0, 4, 3, 1, 2))  # (N, x, x0, H, W)
    p_prev = tn.sum(mix_t * tn.reshape(p0, (n, 1, L, h, w)), axis=2)
    q_t = np.moveaxis(q, -1, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy_term = np.where(q_t > 0, q_t * np.log(np.where(q_t > 0, q_t, 1.0)), 0.0)
    cross = tn.sum(tn.Tensor(q_t) * tn.log(p_prev), axis=(1, 2, 3))
    return tn.Tensor(entropy_term.sum(axis=(1, 2, 3))) - cross


def loss_for_example(example: AnnotatedExample, t: int, rng: np.random.Generator,
                     state: TrainState, use_polyak: bool = False) -> tn.Tensor:
    """Single-sample loss for one example: draws a rater map, then x_t."""
    if not example.rater_maps:
        raise ValueError(f"{example.id}: no rater maps")
    state.schedule.check_step(t)
    x0 = example.rater_maps[rng.integers(len(example.rater_maps))].labels
    params = state.eval_params(use_polyak) if use_polyak else state.params
    per = elementwise_loss(state.model, params, state.schedule, x0[None], example.image[None],
                           np.array([t]), rng)
    return tn.sum(per)


def variational_bound(example: AnnotatedExample, state: TrainState, num_mc: int,
                      rng: np.random.Generator | None = None, use_polyak: bool = True,
                      return_stderr: bool = False):
    """Monte-Carlo estimate of the negative ELBO in nats, averaged over rater maps.

    Every step t = 1..T is evaluated with ``num_mc`` draws of x_t; the prior
    term KL(q(x_T | x_0) || uniform) is exact.
    """
    if num_mc < 1:
        raise ValueError("num_mc must be >= 1")
    rng = rng or np.random.default_rng(0)
    params = state.eval_params(use_polyak)
    sched = state.schedule
    L = state.model.num_classes
    prior = example.image.shape[1] * example.image.shape[2] * prior_kl(sched, L)
    totals, variances = [], []
    with tn.no_grad():
        for lm in example.rater_maps:
            x0 = np.broadcast_to(lm.labels, (num_mc,) + lm.shape)
            images = np.broadcast_to(example.image, (num_mc,) + example.image.shape)
            total, var = prior, 0.0
            for t in range(1, sched.T + 1):
                vals = elementwise_loss(state.model, params, sched, x0, images,
                                        np.full(num_mc, t), rng).data
                total += vals.mean()
                var += vals.var(ddof=1) / num_mc if num_mc > 1 else 0.0
            totals.append(total)
            variances.append(var)
    bound = float(np.mean(totals))
    if return_stderr:
        return bound, float(math.sqrt(np.sum(variances)) / len(totals))
    return bound


# -- optimisation ------------------------------------------------------------------


def adam_step(state: TrainState, lr: float) -> None:
    state.step += 1
    k = state.step
    c1 = 1.0 - ADAM_BETA1 ** k
    c2 = 1.0 - ADAM_BETA2 ** k
    new_params = {}
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m = state.adam_m[name] = ADAM_BETA1 * state.adam_m[name] + (1 - ADAM_BETA1) * g
        v = state.adam_v[name] = ADAM_BETA2 * state.adam_v[name] + (1 - ADAM_BETA2) * g * g
        data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_params[name] = tn.Tensor(data, requires_grad=True, name=name)
    state.params = new_params


def polyak_update(state: TrainState, alpha: float) -> None:
    for name, p in state.params.items():
        state.shadow[name] = alpha * state.shadow[name] + (1.0 - alpha) * p.data


def _batch(examples: Sequence[AnnotatedExample], rng: np.random.Generator, hflip: bool):
    x0 = np.stack([ex.rater_maps[rng.integers(len(ex.rater_maps))].labels for ex in examples])
    images = np.stack([ex.image for ex in examples])
    if hflip:
        flip = rng.random(len(examples)) < 0.5
        x0 = np.where(flip[:, None, None], x0[:, :, ::-1], x0)
        images = np.where(flip[:, None, None, None], images[..., ::-1], images)
    return x0, images


def train(dataset: Sequence[AnnotatedExample], config: TrainConfig,
          model_config: DenoiserConfig | None = None, state: TrainState | None = None,
          log_path=None, checkpoint_dir=None, val_set: Sequence[AnnotatedExample] | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run the configured epochs; resumes from ``state`` when given."""
    if not dataset:
        raise ValueError("dataset is empty")
    L = dataset[0].num_classes
    if state is None:
        model_config = model_config or DenoiserConfig(num_classes=L,
                                                      image_channels=dataset[0].image.shape[0])
        state = TrainState.initial(ToyUNet(model_config), cosine_schedule(config.T), config.seed,
                                   config)
    else:
        state.config = config
    if state.model.num_classes != L:
        raise ValueError(f"model has {state.model.num_classes} classes, data has {L}")

    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    log_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or state.step == 0
        log_fh = open(log_path, "w" if fresh else "a")
        if fresh:
            log_fh.write("step,t_sampled,loss,lr\n")
    best_ged, stale = math.inf, 0
    try:
        while state.epoch < config.epochs:
            rng = np.random.default_rng([config.seed, state.epoch])
            order = rng.permutation(len(dataset))
            epoch_total = 0.0
            for b in range(steps_per_epoch):
                batch = [dataset[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
                x0, images = _batch(batch, rng, config.hflip)
                t = rng.integers(1, state.schedule.T + 1, size=len(batch))
                lr = learning_rate(config, state.step, total_steps)
                loss = tn.mean(elementwise_loss(state.model, state.params, state.schedule,
                                                x0, images, t, rng))
                value = loss.item()
                if not math.isfinite(value):
                    tn.current_tape().clear()
                    raise TrainingDivergedError(
                        f"non-finite loss at step {state.step}, t={t.tolist()}, lr={lr:g}")
                tn.backward(loss)
                adam_step(state, lr)
                polyak_update(state, config.polyak_alpha)
                epoch_total += value * len(batch)
                t_str = ";".join(str(int(x)) for x in t)
                state.history.append((state.step, t_str, value, lr))
                if log_fh and (state.step % config.log_every == 0 or state.step == total_steps):
                    log_fh.write(f"{state.step},{t_str},{value!r},{lr!r}\n")
            state.epoch += 1
            state.epoch_losses.append(epoch_total / len(dataset))
            log.info("epoch %d loss %.4f", state.epoch, state.epoch_losses[-1])
            if checkpoint_dir and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                state.save(Path(checkpoint_dir) / f"epoch{state.epoch:04d}.ckpt")
            if val_set and config.val_every and state.epoch % config.val_every == 0:
                score = validation_ged(state, val_set, config.val_samples, config.seed)
                log.info("epoch %d validation GED_%d %.4f", state.epoch, config.val_samples, score)
                if score < best_ged:
                    best_ged, stale = score, 0
                    if checkpoint_dir:
                        state.save(Path(checkpoint_dir) / "best.ckpt")
                else:
                    stale += 1
                    if config.patience is not None and stale >= config.patience:
                        log.info("stopping early after %d stale validations", stale)
                        break
            if on_epoch:
                on_epoch(state)
    finally:
        if log_fh:
            log_fh.close()
    return state


def validation_ged(state: TrainState, val_set: Sequence[AnnotatedExample], n: int, seed: int) -> float:
    from ccdm.metrics import ged
    from ccdm.sampler import sample_many

    params = state.eval_params(True)
    scores = []
    for i, ex in enumerate(val_set):
        samples = sample_many(state.model, params, ex.image, state.schedule, n, seed=[seed, i])
        scores.append(ged(samples, ex.rater_maps))
    return float(np.mean(scores))


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
