"""ConFormer network: sigmoid input embedding, parallel convolution blocks,
concat + global average pooling, dropout and a sigmoid multi-task head.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .container import ContainerError, read_container, write_container
from .numeric import NumericError, as_tensor, check_finite, glorot_init

CHECKPOINT_KIND = "softsense-checkpoint"


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_features: int
    timesteps: int
    num_tasks: int
    embed_dim: int = 64
    num_blocks: int = 3
    kernel_sizes: list[int] = field(default_factory=lambda: [3, 5, 7])
    dilations: list[int] = field(default_factory=lambda: [1, 2, 4])
    dropout_rate: float = 0.5
    weight_decay: float = 1e-4
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        self.kernel_sizes = [int(k) for k in self.kernel_sizes]
        self.dilations = [int(d) for d in self.dilations]
        self.validate()

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be at least 1")
        if not (self.num_blocks == len(self.kernel_sizes) == len(self.dilations)):
            raise ConfigError(
                "num_blocks, len(kernel_sizes) and len(dilations) must agree: "
                f"{self.num_blocks}, {len(self.kernel_sizes)}, {len(self.dilations)}"
            )
        if self.embed_dim < 1 or self.num_tasks < 1 or self.timesteps < 1:
            raise ConfigError("embed_dim, num_tasks and timesteps must be positive")
        if self.input_features < 1:
            raise ConfigError("input_features must be positive")
        if any(k < 1 for k in self.kernel_sizes) or any(d < 1 for d in self.dilations):
            raise ConfigError("kernel sizes and dilations must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


# Dropout rate presets: the hyper-parameter search picked 0.5, the results
# discussion reports running with 0.15.
DROPOUT_PRESETS = {"search": 0.5, "light": 0.15}

# buffers hold running statistics; they are saved but never trained or decayed
BUFFER_SUFFIXES = (".running_mean", ".running_var")
DECAYED_SUFFIXES = (".W", ".W_a", ".W_b", ".kernel")


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered parameter name -> shape map for a config."""
    D, F, M = cfg.embed_dim, cfg.input_features, cfg.num_tasks
    shapes = {"embed.W": (F, D), "embed.b": (D,)}
    for i, K in enumerate(cfg.kernel_sizes):
        p = f"block{i}."
        shapes.update(
            {
                p + "glu.W_a": (D, D),
                p + "glu.b_a": (D,),
                p + "glu.W_b": (D, D),
                p + "glu.b_b": (D,),
                # no conv bias: the batch norm right after removes any per-channel shift
                p + "conv.kernel": (K, D, D),
                p + "bn.gamma": (D,),
                p + "bn.beta": (D,),
                p + "bn.running_mean": (D,),
                p + "bn.running_var": (D,),
                p + "ffn1.W": (D, D),
                p + "ffn1.b": (D,),
                p + "ffn2.W": (D, D),
                p + "ffn2.b": (D,),
            }
        )
    shapes["head.W"] = (cfg.num_blocks * D, M)
    shapes["head.b"] = (M,)
    return shapes


def is_trainable(name: str) -> bool:
    return not name.endswith(BUFFER_SUFFIXES)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict

    def trainable(self) -> dict:
        return {k: v for k, v in self.params.items() if is_trainable(k)}

    def copy(self) -> "ModelState":
        return ModelState(copy.deepcopy(self.config), {k: v.copy() for k, v in self.params.items()})


def count_params(state_or_cfg) -> int:
    cfg = state_or_cfg.config if isinstance(state_or_cfg, ModelState) else state_or_cfg
    return sum(int(np.prod(s)) for n, s in param_shapes(cfg).items() if is_trainable(n))


def build_model(cfg: ModelConfig, rng: np.random.Generator) -> ModelState:
    cfg.validate()
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(DECAYED_SUFFIXES):
            params[name] = glorot_init(rng, shape)
        elif name.endswith((".gamma", ".running_var")):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return ModelState(cfg, params)


def _bn_state(state: ModelState, prefix: str) -> L.BatchNormState:
    p = state.params
    return L.BatchNormState(
        gamma=p[prefix + "gamma"],
        beta=p[prefix + "beta"],
        running_mean=p[prefix + "running_mean"],
        running_var=p[prefix + "running_var"],
        momentum=state.config.bn_momentum,
        epsilon=state.config.bn_epsilon,
    )


@dataclass
class ForwardTrace:
    mode: str
    caches: dict
    block_outputs: list
    pooled: np.ndarray
    Y: np.ndarray
    bn_updates: dict
    used: bool = False


def embed_input(x, state: ModelState):
    """``sigmoid(x W + b)`` per timestep; returns ``(X, caches)``."""
    x = as_tensor(x)
    cfg = state.config
    if x.ndim != 3 or x.shape[-1] != cfg.input_features:
        raise ShapeError(
            f"input must be [B, T, {cfg.input_features}], got {list(x.shape)}"
        )
    h, c_dense = L.dense_forward(x, state.params["embed.W"], state.params["embed.b"])
    X, c_sig = L.sigmoid_forward(h)
    return X, {"embed.dense": c_dense, "embed.sigmoid": c_sig}


def conformer_block_forward(X, state: ModelState, index: int, mode: str, rng=None):
    """GLU -> dilated conv -> batch norm -> swish -> dense -> dropout -> dense, plus X."""
    cfg = state.config
    p = state.params
    pre = f"block{index}."
    c = {}
    X1, c[pre + "glu"] = L.glu_forward(
        X, p[pre + "glu.W_a"], p[pre + "glu.b_a"], p[pre + "glu.W_b"], p[pre + "glu.b_b"]
    )
    X2, c[pre + "conv"] = L.conv_forward(X1, p[pre + "conv.kernel"], None, cfg.dilations[index])
    h, c[pre + "bn"] = L.batchnorm_forward(X2, _bn_state(state, pre + "bn."), mode)
    h, c[pre + "swish"] = L.swish_forward(h)
    h, c[pre + "ffn1"] = L.dense_forward(h, p[pre + "ffn1.W"], p[pre + "ffn1.b"])
    X2p, c[pre + "dropout"] = L.dropout_forward(h, cfg.dropout_rate, rng, mode)
    out, c[pre + "ffn2"] = L.dense_forward(X2p, p[pre + "ffn2.W"], p[pre + "ffn2.b"])
    return out + X, c


def model_forward(x, state: ModelState, mode: str = "infer", rng=None):
    """Returns ``(Y [B, M], ForwardTrace)``.

    Dropout masks are drawn from ``rng`` in a fixed order (blocks, then head),
    so a freshly seeded generator reproduces the same masks.
    """
    cfg = state.config
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1:] != (cfg.timesteps, cfg.input_features):
        raise ShapeError(
            f"input must be [B, {cfg.timesteps}, {cfg.input_features}], got {list(x.shape)}"
        )
    X, caches = embed_input(x, state)
    outs = []
    for i in range(cfg.num_blocks):
        X3, c = conformer_block_forward(X, state, i, mode, rng)
        caches.update(c)
        outs.append(X3)
    cat = np.concatenate(outs, axis=-1)
    Z, caches["gap"] = L.gap_forward(cat)
    Zd, caches["head.dropout"] = L.dropout_forward(Z, cfg.dropout_rate, rng, mode)
    logits, caches["head.dense"] = L.dense_forward(
        Zd, state.params["head.W"], state.params["head.b"]
    )
    Y, caches["head.sigmoid"] = L.sigmoid_forward(logits)
    check_finite(Y, "model output")
    bn_updates = {}
    if mode == "train":
        for i in range(cfg.num_blocks):
            saved = caches[f"block{i}.bn"].saved
            bn_updates[f"block{i}.bn.running_mean"] = saved["running_mean"]
            bn_updates[f"block{i}.bn.running_var"] = saved["running_var"]
    return Y, ForwardTrace(mode, caches, outs, Z, Y, bn_updates)


def commit_batchnorm(state: ModelState, trace: ForwardTrace) -> None:
    """Write the running statistics gathered by a train-mode forward into ``state``."""
    for name, value in trace.bn_updates.items():
        state.params[name] = value


def weight_penalty(state: ModelState) -> float:
    """``0.5 * weight_decay * sum(W**2)`` over weight matrices; its gradient is ``weight_decay * W``."""
    wd = state.config.weight_decay
    return 0.5 * wd * sum(
        float(np.sum(v * v)) for k, v in state.params.items() if k.endswith(DECAYED_SUFFIXES)
    )


def model_backward(trace: ForwardTrace, dY, state: ModelState) -> dict:
    """Gradients for every trainable parameter, weight decay included on weight matrices."""
    if trace.used:
        raise L.StaleCacheError("forward trace already consumed")
    if trace.mode != "train":
        raise ValueError("model_backward needs a train-mode trace")
    trace.used = True
    cfg = state.config
    c = trace.caches
    dY = as_tensor(dY)
    if dY.shape != trace.Y.shape:
        raise ShapeError(f"dY shape {dY.shape} does not match output {trace.Y.shape}")
    grads = {}

    def back(key, dy, prefix=None):
        dx, g = L.layer_backward(c[key], dy)
        prefix = key if prefix is None else prefix
        for k, v in g.items():
            grads[f"{prefix}.{k}"] = v
        return dx

    d = back("head.sigmoid", dY)
    d = back("head.dense", d, "head")
    d = back("head.dropout", d)
    d_cat = back("gap", d)
    D = cfg.embed_dim
    dX = np.zeros_like(trace.block_outputs[0])
    for i in range(cfg.num_blocks):
        pre = f"block{i}."
        d3 = d_cat[..., i * D : (i + 1) * D]
        dX += d3
        h = back(pre + "ffn2", d3)
        h = back(pre + "dropout", h)
        h = back(pre + "ffn1", h)
        h = back(pre + "swish", h)
        h = back(pre + "bn", h)
        h = back(pre + "conv", h)
        dX += back(pre + "glu", h)
    d = back("embed.sigmoid", dX)
    back("embed.dense", d, "embed")

    wd = cfg.weight_decay
    ordered = {}
    for name, value in state.params.items():
        if not is_trainable(name):
            continue
        g = grads[name]
        if wd and name.endswith(DECAYED_SUFFIXES):
            g = g + wd * value
        ordered[name] = g
    return ordered


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(state: ModelState, path) -> None:
    header = {
        "kind": CHECKPOINT_KIND,
        "config": state.config.to_dict(),
    }
    write_container(path, header, state.params)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> ModelState:
    header, arrays = read_container(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise ContainerError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_dict(header["config"])
    shapes = param_shapes(expected_config if expected_config is not None else cfg)
    if list(arrays) != list(shapes):
        missing = [n for n in shapes if n not in arrays]
        extra = [n for n in arrays if n not in shapes]
        raise ShapeError(f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, arr in arrays.items():
        if tuple(arr.shape) != tuple(shapes[name]):
            raise ShapeError(
                f"{path}: parameter {name!r} has shape {list(arr.shape)}, "
                f"expected {list(shapes[name])}"
            )
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{path}: parameter {name!r} holds non-finite values")
    return ModelState(cfg, arrays)


def predict(state: ModelState, x, batch_size: int = 1024) -> np.ndarray:
    """Infer-mode probabilities in chunks."""
    x = as_tensor(x)
    out = [model_forward(x[i : i + batch_size], state, "infer")[0] for i in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, state.config.num_tasks))
    return np.concatenate(out, axis=0)
