"""Conditioned denoiser predicting per-pixel clean-label probabilities.

The built-in :class:`ToyUNet` is a small convolutional encoder-decoder.
Inputs are the one-hot noisy label map concatenated with the raw image
channels; the step index enters through a sinusoidal embedding that is
projected per block and added to the feature maps.

Any object with ``num_classes`` and a ``predict(params, x_t, image, t)``
method returning an ``(N, L, H, W)`` probability array can stand in for the
built-in network (see :class:`Denoiser`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

from ccdm import tensor as tn
from ccdm.diffusion import one_hot


@dataclass(frozen=True)
class DenoiserConfig:
    num_classes: int = 2
    image_channels: int = 1
    levels: int = 2
    base_channels: int = 16
    embed_dim: int = 32

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    def check_spatial(self, h: int, w: int) -> None:
        f = 2 ** (self.levels - 1)
        if h % f or w % f:
            raise ValueError(f"spatial size {h}x{w} not divisible by {f}")


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; entries 2i and 2i+1 are sin and cos of t * 10000^(-2i/dim)."""
    if dim % 2:
        raise ValueError(f"embedding width must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.size, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class Denoiser(Protocol):
    num_classes: int

    def predict(self, params, x_t: np.ndarray, image: np.ndarray, t) -> np.ndarray: ...


class ToyUNet:
    def __init__(self, config: DenoiserConfig):
        self.config = config
        self.num_classes = config.num_classes

    # -- parameters ---------------------------------------------------------

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        widths = c.widths()
        shapes: dict[str, tuple[int, ...]] = {
            "time.w": (c.embed_dim, c.embed_dim),
            "time.b": (c.embed_dim,),
        }

        def block(prefix, cin, cout):
            shapes[f"{prefix}.conv1.w"] = (cout, cin, 3, 3)
            shapes[f"{prefix}.conv1.b"] = (cout,)
            shapes[f"{prefix}.temb.w"] = (c.embed_dim, cout)
            shapes[f"{prefix}.temb.b"] = (cout,)
            shapes[f"{prefix}.conv2.w"] = (cout, cout, 3, 3)
            shapes[f"{prefix}.conv2.b"] = (cout,)

        cin = c.num_classes + c.image_channels
        for i, w in enumerate(widths):
            block(f"enc{i}", cin, w)
            cin = w
        for i in range(c.levels - 2, -1, -1):
            block(f"dec{i}", cin + widths[i], widths[i])
            cin = widths[i]
        shapes["head.w"] = (c.num_classes, cin, 1, 1)
        shapes["head.b"] = (c.num_classes,)
        return shapes

    def num_params(self) -> int:
        return int(sum(int(np.prod(s)) for s in self.param_shapes().values()))

    def init_params(self, rng: np.random.Generator) -> dict[str, tn.Tensor]:
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".b") or name.startswith("head."):
                data = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            params[name] = tn.Tensor(data, requires_grad=True, name=name)
        return params

    # -- forward ------------------------------------------------------------

    def forward(self, params: dict[str, tn.Tensor], xt_onehot, image, t) -> tn.Tensor:
        """Probabilities (N, L, H, W) as a differentiable tensor."""
        c = self.config
        xt_onehot = np.asarray(xt_onehot, dtype=np.float64)
        image = np.asarray(image, dtype=np.float64)
        if xt_onehot.ndim != 4 or xt_onehot.shape[1] != c.num_classes:
            raise ValueError(f"x_t one-hot must be (N, {c.num_classes}, H, W), got {xt_onehot.shape}")
        if image.shape != (xt_onehot.shape[0], c.image_channels) + xt_onehot.shape[2:]:
            raise ValueError(f"image shape {image.shape} does not match x_t {xt_onehot.shape}")
        c.check_spatial(*xt_onehot.shape[2:])
        t = np.broadcast_to(np.asarray(t), (xt_onehot.shape[0],))

        emb = tn.Tensor(time_embedding(t, c.embed_dim))
        emb = tn.silu(emb @ params["time.w"] + params["time.b"])

        def block(prefix, h):
            h = tn.conv2d(h, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"])
            proj = emb @ params[f"{prefix}.temb.w"] + params[f"{prefix}.temb.b"]
            h = tn.silu(h + tn.reshape(proj, proj.shape + (1, 1)))
            return tn.silu(tn.conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"]))

        h = tn.Tensor(np.concatenate([xt_onehot, image], axis=1))
        skips = []
        for i in range(c.levels):
            if i:
                h = tn.avg_pool2(h)
            h = block(f"enc{i}", h)
            skips.append(h)
        for i in range(c.levels - 2, -1, -1):
            h = tn.concat([tn.upsample2(h), skips[i]], axis=1)
            h = block(f"dec{i}", h)
        logits = tn.conv2d(h, params["head.w"], params["head.b"])
        return tn.softmax(logits, axis=1)

    def predict(self, params, x_t: np.ndarray, image: np.ndarray, t) -> np.ndarray:
        """Untracked forward on 1-indexed label maps (N, H, W)."""
        if params is None:
            raise ValueError("denoiser has no parameters")
        onehot = np.moveaxis(one_hot(x_t, self.num_classes), -1, 1)
        with tn.no_grad():
            return self.forward(params, onehot, image, t).data


def predict_p0(model: Denoiser, params, x_t: np.ndarray, image: np.ndarray, t) -> np.ndarray:
    """D x L probability rows for a single (H, W) label map."""
    x_t = np.asarray(x_t)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    probs = model.predict(params, x_t[None], image[None], np.array([t]))[0]
    return np.moveaxis(probs, 0, -1).reshape(-1, probs.shape[0])
