"""
PhysNet-style 3-D CNN for rPPG and the SpO2 regression head.

Input is a batch of diff-normalized clips, N x 3 x T x H x W. The encoder
halves the spatial size in every block and, where configured, the temporal
length; the decoder restores T with nearest-neighbour temporal upsampling.
A 1x1x1 feature convolution gives a ``feature_dim`` map whose spatial mean
is the rPPG waveform (after a final 1x1x1 projection) and whose global mean
feeds the SpO2 head.
"""

from dataclasses import asdict, dataclass

import numpy as np

from pulseface.autodiff import Tensor, avgpool3d, conv3d, dense, global_pool, parameter, relu, upsample_temporal
from pulseface.errors import RangeError, ShapeError


@dataclass(frozen=True)
class PhysNetConfig:
    frames: int = 60
    size: int = 32
    channels: tuple[int, ...] = (16, 32, 32, 64)
    temporal_pools: tuple[int, ...] = (1, 2, 2, 1)
    feature_dim: int = 128
    kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "temporal_pools", tuple(int(p) for p in self.temporal_pools))
        if len(self.channels) != len(self.temporal_pools):
            raise RangeError("channels and temporal_pools must have the same length")
        if self.size % (2 ** len(self.channels)) != 0:
            raise RangeError(f"size {self.size} must be divisible by {2 ** len(self.channels)}")
        shrink = int(np.prod(self.temporal_pools))
        if self.frames % shrink != 0 or shrink != 2**self.n_upsamplings:
            raise RangeError(
                f"temporal pools {self.temporal_pools} must shrink T by a power of two that divides {self.frames}"
            )
        if self.kernel % 2 != 1:
            raise RangeError("kernel must be odd")

    @property
    def n_upsamplings(self) -> int:
        return sum(1 for p in self.temporal_pools if p == 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_scale(cls, **overrides) -> "PhysNetConfig":
        values = {"size": 128, "channels": (32, 64, 64, 64), **overrides}
        return cls(**values)


def _he_uniform(shape: tuple[int, ...], fan_in: int, seed: int, layer: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, layer]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Holds named parameter tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def _add(self, name: str, values: np.ndarray) -> Tensor:
        self._params[name] = parameter(values)
        return self._params[name]

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching arrays in; returns the names that were loaded."""
        loaded = []
        for name, p in self._params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name}")
                continue
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise ShapeError(f"load {name}", values.shape, p.shape)
            p.data = values.copy()
            loaded.append(name)
        if strict:
            extra = sorted(set(state) - set(self._params))
            if extra:
                raise KeyError(f"unexpected parameters {extra}")
        return loaded


class PhysNet(Module):
    def __init__(self, cfg: PhysNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or PhysNetConfig()
        k = self.cfg.kernel
        layer = 0
        in_ch = 3
        for i, out_ch in enumerate(self.cfg.channels):
            fan_in = in_ch * k**3
            self._add(f"encoder.{i}.weight", _he_uniform((out_ch, in_ch, k, k, k), fan_in, self.cfg.seed, layer))
            self._add(f"encoder.{i}.bias", np.zeros(out_ch))
            in_ch = out_ch
            layer += 1
        for i in range(self.cfg.n_upsamplings):
            self._add(f"decoder.{i}.weight", _he_uniform((in_ch, in_ch, k, 1, 1), in_ch * k, self.cfg.seed, layer))
            self._add(f"decoder.{i}.bias", np.zeros(in_ch))
            layer += 1
        dim = self.cfg.feature_dim
        self._add("feature.weight", _he_uniform((dim, in_ch, 1, 1, 1), in_ch, self.cfg.seed, layer))
        self._add("feature.bias", np.zeros(dim))
        layer += 1
        self._add("rppg.weight", _he_uniform((1, dim, 1, 1, 1), dim, self.cfg.seed, layer))
        self._add("rppg.bias", np.zeros(1))

    def _check_input(self, x: Tensor) -> None:
        expected = (3, self.cfg.frames, self.cfg.size, self.cfg.size)
        if x.ndim != 5 or x.shape[1:] != expected:
            raise ShapeError("PhysNet input", x.shape, ("N", *expected))

    def features(self, x) -> Tensor:
        """Feature map N x feature_dim x T x h x w."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        p = self._params
        pad = self.cfg.kernel // 2
        for i, pool in enumerate(self.cfg.temporal_pools):
            x = relu(conv3d(x, p[f"encoder.{i}.weight"], p[f"encoder.{i}.bias"], padding=pad))
            x = avgpool3d(x, (pool, 2, 2))
        for i in range(self.cfg.n_upsamplings):
            x = upsample_temporal(x, 2)
            x = relu(conv3d(x, p[f"decoder.{i}.weight"], p[f"decoder.{i}.bias"], padding=(pad, 0, 0)))
        return relu(conv3d(x, p["feature.weight"], p["feature.bias"]))

    def rppg(self, feature_map: Tensor) -> Tensor:
        p = self._params
        out = conv3d(feature_map, p["rppg.weight"], p["rppg.bias"])
        n, _, t = out.shape[:3]
        return global_pool(out, axes=(3, 4)).reshape(n, t)

    def pooled(self, feature_map: Tensor) -> Tensor:
        return global_pool(feature_map)

    def __call__(self, x) -> Tensor:
        """rPPG waveform batch, N x T."""
        return self.rppg(self.features(x))


@dataclass(frozen=True)
class Spo2HeadConfig:
    feature_dim: int = 128
    hidden: tuple[int, ...] = (60, 32)
    bias_init: float = 93.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


class Spo2Head(Module):
    """Dense 128 -> 60 -> 32 -> 1 regressor; the output layer starts at zero weights and ``bias_init``."""

    def __init__(self, cfg: Spo2HeadConfig | None = None):
        super().__init__()
        self.cfg = cfg or Spo2HeadConfig()
        sizes = (self.cfg.feature_dim, *self.cfg.hidden)
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            self._add(f"head.{i}.weight", _he_uniform((fan_in, fan_out), fan_in, self.cfg.seed, 100 + i))
            self._add(f"head.{i}.bias", np.zeros(fan_out))
        last = len(self.cfg.hidden)
        self._add(f"head.{last}.weight", np.zeros((sizes[-1], 1)))
        self._add(f"head.{last}.bias", np.full(1, self.cfg.bias_init))

    def __call__(self, pooled: Tensor) -> Tensor:
        """SpO2 per sample, shape N."""
        if pooled.ndim != 2 or pooled.shape[1] != self.cfg.feature_dim:
            raise ShapeError("Spo2Head input", pooled.shape, ("N", self.cfg.feature_dim))
        x = pooled
        n_layers = len(self.cfg.hidden) + 1
        for i in range(n_layers):
            x = dense(x, self._params[f"head.{i}.weight"], self._params[f"head.{i}.bias"])
            if i < n_layers - 1:
                x = relu(x)
        return x.reshape(x.shape[0])


class Spo2Model(Module):
    """PhysNet backbone plus SpO2 head, sharing one parameter namespace."""

    def __init__(self, backbone: PhysNet, head: Spo2Head):
        super().__init__()
        if head.cfg.feature_dim != backbone.cfg.feature_dim:
            raise ShapeError("Spo2Model", (backbone.cfg.feature_dim,), (head.cfg.feature_dim,))
        self.backbone = backbone
        self.head = head
        self._params = {**backbone.parameters(), **head.parameters()}

    def __call__(self, x) -> Tensor:
        return self.head(self.backbone.pooled(self.backbone.features(x)))
