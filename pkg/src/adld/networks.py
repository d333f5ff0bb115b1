"""The eight sub-networks as pure forward functions over a named parameter set.

Sub-network keys: e_f (rich-feature encoder), e_t (texture encoder),
g (latent generator), f_l (landmark detector), f_a (AU detector),
d_l (landmark discriminator), d_f_s / d_f_t (feature discriminators).

Interfaces fixed by the architecture: the rich feature x has 64 channels,
the landmark-free feature z_t has 64, the landmark-related feature z_l has 1,
response maps have 49 channels, and the spatial side is d = l/4 (exactly two
average pools, all convolutions size-preserving).  Interior channel widths
scale with ``width_scale`` for desk-size runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor

N_LANDMARKS = 49
RICH_CHANNELS = 64
TEXTURE_CHANNELS = 64

ALL_MODULES = ("e_f", "e_t", "g", "f_l", "f_a", "d_l", "d_f_s", "d_f_t")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 176
    au_count: int = 6
    width_scale: float = 1.0
    modules: tuple = ALL_MODULES

    def __post_init__(self):
        if self.image_size % 4 != 0:
            raise ValueError(f"image size {self.image_size} not divisible by 4")
        if not 0 < self.width_scale <= 1.0:
            raise ValueError(f"width scale {self.width_scale} outside (0, 1]")

    @property
    def map_size(self) -> int:
        return self.image_size // 4

    def width(self, channels: int) -> int:
        return max(4, int(round(channels * self.width_scale)))


@dataclass(frozen=True)
class ConvSpec:
    name: str
    cin: int
    cout: int
    norm: str | None  # batch | instance | None
    act: str | None  # prelu | tanh | None


def _stack(prefix: str, plan: list[tuple[int, int]], norm: str, last_act: str | None) -> list[ConvSpec]:
    """Conv stack with norm+prelu on all but the last layer."""
    specs = []
    for i, (cin, cout) in enumerate(plan):
        last = i == len(plan) - 1
        specs.append(
            ConvSpec(
                f"{prefix}.conv{i}",
                cin,
                cout,
                None if last else norm,
                last_act if last else "prelu",
            )
        )
    return specs


_ARCH_CACHE: dict[ModelConfig, dict] = {}


def architecture(config: ModelConfig) -> dict[str, list[ConvSpec]]:
    """Layer plans for every sub-network at this width scale."""
    cached = _ARCH_CACHE.get(config)
    if cached is not None:
        return cached
    w = config.width
    m = config.au_count
    arch: dict[str, list[ConvSpec]] = {}
    # rich-feature encoder: two blocks of two convs, each block pooled; tanh output
    a, b = w(32), w(64)
    arch["e_f"] = [
        ConvSpec("e_f.conv0", 3, a, "batch", "prelu"),
        ConvSpec("e_f.conv1", a, a, "batch", "prelu"),
        ConvSpec("e_f.conv2", a, b, "batch", "prelu"),
        ConvSpec("e_f.conv3", b, RICH_CHANNELS, None, None),  # tanh applied after the final pool
    ]
    c = w(64)
    # landmark detector and its discriminator share the structure: 5 convs, last has 49 channels
    arch["f_l"] = _stack("f_l", [(RICH_CHANNELS, c), (c, c), (c, c), (c, c), (c, N_LANDMARKS)], "instance", None)
    arch["d_l"] = _stack("d_l", [(TEXTURE_CHANNELS, c), (c, c), (c, c), (c, c), (c, N_LANDMARKS)], "instance", None)
    # texture encoder: 4 convs, tanh output
    arch["e_t"] = _stack("e_t", [(RICH_CHANNELS, c), (c, c), (c, c), (c, TEXTURE_CHANNELS)], "instance", "tanh")
    # generator: 5 convs over the 65-channel concat, tanh output
    arch["g"] = _stack(
        "g", [(1 + TEXTURE_CHANNELS, c), (c, c), (c, c), (c, c), (c, RICH_CHANNELS)], "instance", "tanh"
    )
    # AU detector: one independent branch per AU
    c32, c16 = w(32), w(16)
    for j in range(m):
        arch[f"f_a.br{j}"] = [
            ConvSpec(f"f_a.br{j}.conv0", RICH_CHANNELS, c32, "batch", "prelu"),
            ConvSpec(f"f_a.br{j}.conv1", c32, c32, "batch", "prelu"),
            ConvSpec(f"f_a.br{j}.conv2", c32, c16, "batch", "prelu"),
            ConvSpec(f"f_a.br{j}.conv3", c16, c16, "batch", "prelu"),
        ]
    # feature discriminators: 5 convs narrowing to a 1-channel score map
    c8 = w(8)
    for name in ("d_f_s", "d_f_t"):
        arch[name] = _stack(
            name, [(RICH_CHANNELS, c), (c, c32), (c32, c16), (c16, c8), (c8, 1)], "instance", None
        )
    _ARCH_CACHE[config] = arch
    return arch


class ModelParams:
    """Named parameter tensors plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.norm_state: dict[str, BatchNormState] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def subnet(self, prefix: str) -> list[str]:
        return [n for n in self.names() if n.startswith(prefix + ".")]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


def _seed_for(name: str, seed: int) -> np.random.Generator:
    digest = hashlib.blake2s(name.encode(), digest_size=8).digest()
    key = int.from_bytes(digest, "little") ^ (seed & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Fan-in scaled normal conv weights, zero biases, unit/zero norm affine,
    prelu slopes 0.25.  Each tensor draws from its own name-keyed stream, so
    adding or removing a sub-network never shifts another's initialization."""
    mp = ModelParams(config)
    arch = architecture(config)
    for subnet, specs in arch.items():
        root = subnet.split(".")[0]
        if root not in config.modules:
            continue
        for spec in specs:
            fan_in = spec.cin * 9
            rng = _seed_for(spec.name, seed)
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.cout, spec.cin, 3, 3)).astype(np.float32)
            mp.params[f"{spec.name}.w"] = Tensor(w, requires_grad=True)
            mp.params[f"{spec.name}.b"] = Tensor(np.zeros(spec.cout, dtype=np.float32), requires_grad=True)
            if spec.norm is not None:
                mp.params[f"{spec.name}.gamma"] = Tensor(np.ones(spec.cout, dtype=np.float32), requires_grad=True)
                mp.params[f"{spec.name}.beta"] = Tensor(np.zeros(spec.cout, dtype=np.float32), requires_grad=True)
                if spec.norm == "batch":
                    mp.norm_state[spec.name] = BatchNormState(spec.cout)
            if spec.act == "prelu":
                mp.params[f"{spec.name}.slope"] = Tensor(
                    np.full(spec.cout, 0.25, dtype=np.float32), requires_grad=True
                )
    if "f_a" in config.modules:
        c16 = config.width(16)
        for j in range(config.au_count):
            rng = _seed_for(f"f_a.br{j}.fc", seed)
            w = rng.normal(0.0, np.sqrt(2.0 / c16), size=(1, c16)).astype(np.float32)
            mp.params[f"f_a.br{j}.fc.w"] = Tensor(w, requires_grad=True)
            mp.params[f"f_a.br{j}.fc.b"] = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    return mp


def describe(params: ModelParams) -> list[tuple[str, tuple, int]]:
    """(name, shape, element count) rows plus grand total appended last."""
    rows = [(n, tuple(params[n].shape), params[n].size) for n in params.names()]
    rows.append(("total", (), sum(r[2] for r in rows)))
    return rows


# ---------------------------------------------------------------------------
# Forward functions


def _fetch(params: ModelParams, name: str, frozen: bool) -> Tensor:
    t = params[name]
    return T.stop_gradient(t) if frozen else t


def _run_stack(
    x: Tensor,
    params: ModelParams,
    specs: list[ConvSpec],
    training: bool,
    frozen: bool,
) -> Tensor:
    h = x
    for spec in specs:
        h = T.conv2d(h, _fetch(params, f"{spec.name}.w", frozen), _fetch(params, f"{spec.name}.b", frozen))
        if spec.norm is not None:
            state = params.norm_state.get(spec.name)
            h = T.normalize(
                h,
                spec.norm,
                _fetch(params, f"{spec.name}.gamma", frozen),
                _fetch(params, f"{spec.name}.beta", frozen),
                state=state,
                training=training,
            )
        if spec.act == "prelu":
            h = T.activate(h, "prelu", _fetch(params, f"{spec.name}.slope", frozen))
        elif spec.act == "tanh":
            h = T.activate(h, "tanh")
    return h


def encode_rich(g_img: Tensor, params: ModelParams, training: bool = True) -> Tensor:
    """(B,3,l,l) image to the 64-channel rich feature at d = l/4, in (-1,1)."""
    specs = architecture(params.config)["e_f"]
    h = _run_stack(g_img, params, specs[:2], training, False)
    h = T.avg_pool2x2(h)
    h = _run_stack(h, params, specs[2:], training, False)
    h = T.avg_pool2x2(h)
    return T.activate(h, "tanh")


def detect_landmarks(x_like: Tensor, params: ModelParams, training: bool = True, frozen: bool = False) -> Tensor:
    """Raw (pre-softmax) 49-channel landmark response maps."""
    return _run_stack(x_like, params, architecture(params.config)["f_l"], training, frozen)


def discriminate_landmarks(z_t: Tensor, params: ModelParams, training: bool = True, frozen: bool = False) -> Tensor:
    """Adversary response maps from the landmark-free feature."""
    return _run_stack(z_t, params, architecture(params.config)["d_l"], training, frozen)


def landmark_related_feature(maps: Tensor) -> Tensor:
    """Spatial softmax per response map, summed across landmarks: (B,1,d,d)."""
    return T.channel_sum(T.spatial_softmax(maps))


def encode_texture(x_like: Tensor, params: ModelParams, training: bool = True) -> Tensor:
    """64-channel landmark-free feature in (-1,1)."""
    return _run_stack(x_like, params, architecture(params.config)["e_t"], training, False)


def generate_latent(z_l: Tensor, z_t: Tensor, params: ModelParams, training: bool = True) -> Tensor:
    """Combine landmark-related and landmark-free features into a latent feature."""
    h = T.concat_channels(z_l, z_t)
    return _run_stack(h, params, architecture(params.config)["g"], training, False)


def detect_aus(feat: Tensor, params: ModelParams, training: bool = True) -> Tensor:
    """Per-AU logits from independent conv branches, (B, m)."""
    arch = architecture(params.config)
    logits = None
    for j in range(params.config.au_count):
        h = _run_stack(feat, params, arch[f"f_a.br{j}"], training, False)
        h = T.global_avg_pool(h)
        h = T.linear(h, params[f"f_a.br{j}.fc.w"], params[f"f_a.br{j}.fc.b"])
        logits = h if logits is None else T.concat_channels(logits, h)
    return logits


def discriminate_feature(feat: Tensor, domain: str, params: ModelParams, training: bool = True, frozen: bool = False) -> Tensor:
    """Patch-mean realness score (B,1) from the domain's feature discriminator."""
    if domain not in ("source", "target"):
        raise ValueError(f"unknown domain {domain!r}")
    name = "d_f_s" if domain == "source" else "d_f_t"
    h = _run_stack(feat, params, architecture(params.config)[name], training, frozen)
    return T.global_avg_pool(h)


# ---------------------------------------------------------------------------
# Checkpoint format: index.json plus a concatenated tensor blob


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, params: ModelParams, extra: dict[str, np.ndarray] | None = None, metadata: dict | None = None) -> None:
    """Write index.json and tensors.bin under ``path`` (a directory)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    index: dict[str, int] = {}

    def add(name: str, arr: np.ndarray) -> None:
        index[name] = len(blob)
        blob.extend(T.adtn_bytes(arr))

    for name in params.names():
        add(f"param.{name}", params[name].data)
    for name, state in sorted(params.norm_state.items()):
        add(f"norm.{name}.mean", state.mean)
        add(f"norm.{name}.var", state.var)
        add(f"norm.{name}.flag", np.array([1.0 if state.initialized else 0.0], dtype=np.float32))
    for name, arr in sorted((extra or {}).items()):
        add(f"extra.{name}", arr)
    meta = dict(metadata or {})
    meta["model_config"] = {
        "image_size": params.config.image_size,
        "au_count": params.config.au_count,
        "width_scale": params.config.width_scale,
        "modules": list(params.config.modules),
    }
    (path / "tensors.bin").write_bytes(bytes(blob))
    (path / "index.json").write_text(json.dumps({"version": 1, "metadata": meta, "tensors": index}, indent=1))


def load_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    path = Path(path)
    index = json.loads((path / "index.json").read_text())
    blob = (path / "tensors.bin").read_bytes()
    meta = index["metadata"]
    mc = meta["model_config"]
    config = ModelConfig(
        image_size=mc["image_size"],
        au_count=mc["au_count"],
        width_scale=mc["width_scale"],
        modules=tuple(mc["modules"]),
    )
    params = init_params(config, seed=0)
    extra: dict[str, np.ndarray] = {}
    for name, offset in index["tensors"].items():
        arr, _ = T.adtn_from_bytes(blob, offset)
        if name.startswith("param."):
            key = name[len("param.") :]
            params.params[key] = Tensor(arr, requires_grad=True)
        elif name.startswith("norm."):
            rest = name[len("norm.") :]
            layer, kind = rest.rsplit(".", 1)
            state = params.norm_state.setdefault(layer, BatchNormState(arr.size))
            if kind == "mean":
                state.mean = arr
            elif kind == "var":
                state.var = arr
            elif kind == "flag":
                state.initialized = bool(arr[0])
        elif name.startswith("extra."):
            extra[name[len("extra.") :]] = arr
    return params, extra, meta
