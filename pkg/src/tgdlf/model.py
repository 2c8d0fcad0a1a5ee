"""Encoder-decoder Transformer that maps a 96 h x 9 feature window to 24
next-day fluctuation values.

Tokens are time steps. The decoder runs on 24 learned query embeddings (one
per forecast hour) so the whole day is produced in a single pass.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import ShapeError, Tensor


@dataclass
class ModelConfig:
    d_model: int = 12
    n_heads: int = 2
    n_encoder_blocks: int = 1
    n_decoder_blocks: int = 1
    ffn_hidden: int | None = None
    input_len: int = 96
    output_len: int = 24
    n_features: int = 9
    positional_encoding: bool = True

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.d_model
        for name in ("d_model", "n_heads", "n_encoder_blocks", "n_decoder_blocks",
                     "ffn_hidden", "input_len", "output_len", "n_features"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AttentionWeights:
    """Per-head projections W_q[i], W_k[i], W_v[i] ([d_model, d_model/H]) and W_o."""

    query: list[Tensor]
    key: list[Tensor]
    value: list[Tensor]
    out: Tensor

    @property
    def n_heads(self) -> int:
        return len(self.query)


def scaled_dot_product_attention(q, k, v, mask=None):
    """Return ``(A @ V, A)`` with ``A = softmax(Q K^T / sqrt(d_k))``.

    Leading batch axes are allowed as long as they agree across q, k and v.
    """
    q, k, v = nc.as_tensor(q), nc.as_tensor(k), nc.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    scores = nc.matmul(nc.scale(q, 1.0 / math.sqrt(d_k)), nc.transpose(k))
    attn = nc.softmax_rows(scores, mask)
    return nc.matmul(attn, v), attn


def multi_head_attention(q_in, k_in, v_in, weights: AttentionWeights, mask=None, stack_maps: bool = True):
    """Concatenate per-head attention outputs and project with W_o.

    Returns the [..., n_q, d_model] output and the per-head attention
    matrices stacked as [..., H, n_q, n_k].
    """
    d_model = weights.out.shape[0]
    for t in (q_in, k_in, v_in):
        if t.shape[-1] != d_model:
            raise ShapeError(f"expected feature width {d_model}, got {t.shape}")
    heads, maps = [], []
    for wq, wk, wv in zip(weights.query, weights.key, weights.value):
        out, attn = scaled_dot_product_attention(q_in @ wq, k_in @ wk, v_in @ wv, mask)
        heads.append(out)
        maps.append(attn.data)
    merged = heads[0] if len(heads) == 1 else nc.concat(heads, axis=-1)
    return merged @ weights.out, (np.stack(maps, axis=-3) if stack_maps else None)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    if length < 1 or d_model < 1:
        raise ValueError("length and d_model must be positive")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model)
    rate = 1.0 / np.power(10000.0, (2 * (i // 2)) / d_model)
    angle = pos * rate[None, :]
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _uniform(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """(name, shape, fan_in) in a fixed order; fan_in None marks a norm parameter."""
    d, f, dk = cfg.d_model, cfg.ffn_hidden, cfg.head_dim
    spec = [("embedding.weight", (cfg.n_features, d), cfg.n_features),
            ("embedding.bias", (d,), cfg.n_features)]

    def attention(prefix):
        out = []
        for h in range(cfg.n_heads):
            for kind in ("q", "k", "v"):
                out.append((f"{prefix}.{kind}{h}", (d, dk), d))
        out.append((f"{prefix}.out", (d, d), d))
        return out

    def ffn(prefix):
        return [(f"{prefix}.w1", (d, f), d), (f"{prefix}.b1", (f,), d),
                (f"{prefix}.w2", (f, d), f), (f"{prefix}.b2", (d,), f)]

    def norm(prefix):
        return [(f"{prefix}.gain", (d,), None), (f"{prefix}.bias", (d,), None)]

    for b in range(cfg.n_encoder_blocks):
        p = f"encoder{b}"
        spec += attention(f"{p}.self") + norm(f"{p}.norm1") + ffn(f"{p}.ffn") + norm(f"{p}.norm2")
    spec.append(("decoder.queries", (cfg.output_len, d), d))
    for b in range(cfg.n_decoder_blocks):
        p = f"decoder{b}"
        spec += (attention(f"{p}.self") + norm(f"{p}.norm1") + attention(f"{p}.cross")
                 + norm(f"{p}.norm2") + ffn(f"{p}.ffn") + norm(f"{p}.norm3"))
    spec += [("head.weight", (d, 1), d), ("head.bias", (1,), d)]
    return spec


def param_group(name: str) -> str:
    """Map a parameter name to embedding / encoder / decoder / head."""
    root = name.split(".", 1)[0]
    return root.rstrip("0123456789")


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict[str, Tensor]
    # per-feature standardization applied before embedding (not trained)
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(9))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(9))

    @classmethod
    def init(cls, config: ModelConfig | None = None, seed: int = 0) -> "TransformerModel":
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape, fan_in in _param_shapes(config):
            if fan_in is None:
                value = np.ones(shape) if name.endswith("gain") else np.zeros(shape)
            else:
                value = _uniform(rng, shape, fan_in)
            params[name] = Tensor(value, requires_grad=True, name=name)
        return cls(config, params, np.zeros(config.n_features), np.ones(config.n_features))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def copy(self) -> "TransformerModel":
        return copy.deepcopy(self)

    def attention(self, prefix: str) -> AttentionWeights:
        h = range(self.config.n_heads)
        p = self.params
        return AttentionWeights([p[f"{prefix}.q{i}"] for i in h], [p[f"{prefix}.k{i}"] for i in h],
                                [p[f"{prefix}.v{i}"] for i in h], p[f"{prefix}.out"])

    def set_input_scaling(self, inputs: np.ndarray, flag_columns=(5, 6, 7, 8)):
        """Fit per-feature mean/std on training windows [N, T, F]; flags stay raw."""
        flat = np.asarray(inputs, dtype=np.float64).reshape(-1, inputs.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std[std < 1e-12] = 1.0
        mean[list(flag_columns)] = 0.0
        std[list(flag_columns)] = 1.0
        self.input_mean, self.input_std = mean, std

    # ------------------------------------------------------------ forward

    def _ffn(self, x, prefix):
        p = self.params
        hidden = nc.relu(nc.add(x @ p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return nc.add(hidden @ p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _norm(self, x, prefix):
        return nc.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def encode(self, batch: np.ndarray, dump: dict | None = None) -> Tensor:
        cfg = self.config
        x = Tensor((np.asarray(batch, dtype=np.float64) - self.input_mean) / self.input_std)
        h = nc.add(x @ self.params["embedding.weight"], self.params["embedding.bias"])
        if cfg.positional_encoding:
            h = nc.add(h, Tensor(positional_encoding(cfg.input_len, cfg.d_model)))
        for b in range(cfg.n_encoder_blocks):
            p = f"encoder{b}"
            a, maps = multi_head_attention(h, h, h, self.attention(f"{p}.self"), stack_maps=dump is not None)
            h = self._norm(nc.add(h, a), f"{p}.norm1")
            h = self._norm(nc.add(h, self._ffn(h, f"{p}.ffn")), f"{p}.norm2")
            if dump is not None:
                dump[f"{p}/self"] = maps
        return h

    def forward(self, batch, collect_attention: bool = True) -> tuple[Tensor, dict[str, np.ndarray]]:
        """Predict [B, 24] from [B, 96, 9].

        The dump maps ``"<layer>/<kind>"`` to attention arrays of shape
        [B, H, n_query, n_key] (empty when ``collect_attention`` is off).
        """
        cfg = self.config
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 3 or batch.shape[1:] != (cfg.input_len, cfg.n_features):
            raise ShapeError(f"expected [B, {cfg.input_len}, {cfg.n_features}], got {batch.shape}")
        n = batch.shape[0]
        dump: dict[str, np.ndarray] | None = {} if collect_attention else None
        memory = self.encode(batch, dump)
        causal = np.tril(np.ones((cfg.output_len, cfg.output_len), dtype=bool))
        y = nc.expand(self.params["decoder.queries"], (n,))
        for b in range(cfg.n_decoder_blocks):
            p = f"decoder{b}"
            a, self_maps = multi_head_attention(y, y, y, self.attention(f"{p}.self"), mask=causal,
                                                stack_maps=dump is not None)
            y = self._norm(nc.add(y, a), f"{p}.norm1")
            a, cross_maps = multi_head_attention(y, memory, memory, self.attention(f"{p}.cross"),
                                                 stack_maps=dump is not None)
            y = self._norm(nc.add(y, a), f"{p}.norm2")
            y = self._norm(nc.add(y, self._ffn(y, f"{p}.ffn")), f"{p}.norm3")
            if dump is not None:
                dump[f"{p}/self"] = self_maps
                dump[f"{p}/cross"] = cross_maps
        out = nc.add(y @ self.params["head.weight"], self.params["head.bias"])
        return nc.reshape(out, (n, cfg.output_len)), dump if dump is not None else {}

    def predict(self, batch, chunk: int = 1024) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        with nc.no_grad():
            parts = [self.forward(batch[i:i + chunk], collect_attention=False)[0].data for i in range(0, len(batch), chunk)]
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, self.config.output_len))

    # ------------------------------------------------------------ checkpoints

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.params.items()}
        state["__input_mean__"] = self.input_mean.copy()
        state["__input_std__"] = self.input_std.copy()
        return state

    def save(self, path):
        path = Path(path)
        nc.save_params(path, self.state_dict())
        path.with_suffix(".json").write_text(_dumps(asdict(self.config)))

    @classmethod
    def load(cls, path) -> "TransformerModel":
        path = Path(path)
        config = ModelConfig(**json.loads(path.with_suffix(".json").read_text()))
        state = nc.load_params(path)
        model = cls.init(config)
        for name, t in model.params.items():
            if state[name].shape != t.shape:
                raise ShapeError(f"checkpoint entry {name} has shape {state[name].shape}")
            t.data = state[name]
        model.input_mean = state["__input_mean__"]
        model.input_std = state["__input_std__"]
        return model


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- attention export


def export_attention(dump: dict[str, np.ndarray], directory, sample: int = 0) -> list[Path]:
    """Write each layer/head matrix of one sample as ``<layer>_<kind>_head<i>.csv``.

    First line is ``rows,cols``; values are written with ``repr`` so the
    file round-trips exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for key in sorted(dump):
        maps = dump[key][sample]
        layer, kind = key.split("/")
        for h, mat in enumerate(maps):
            path = directory / f"{layer}_{kind}_head{h}.csv"
            lines = [f"{mat.shape[0]},{mat.shape[1]}"]
            lines += [",".join(repr(float(v)) for v in row) for row in mat]
            path.write_text("\n".join(lines) + "\n")
            written.append(path)
    return written


def read_matrix(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    rows, cols = (int(v) for v in lines[0].split(","))
    mat = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    if mat.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, body is {mat.shape}")
    return mat


def attention_profile(dump: dict[str, np.ndarray] | np.ndarray, layer: str = "encoder0/self") -> np.ndarray:
    """Share of encoder attention mass landing on each hour of day (sums to 1).

    Key positions are folded modulo 24, which assumes windows start at 00:00.
    """
    maps = dump[layer] if isinstance(dump, dict) else np.asarray(dump)
    mass = maps.reshape(-1, maps.shape[-2], maps.shape[-1]).sum(axis=(0, 1))
    n_keys = mass.shape[0]
    if n_keys % 24:
        raise ShapeError(f"key length {n_keys} is not a whole number of days")
    profile = mass.reshape(n_keys // 24, 24).sum(axis=0)
    return profile / profile.sum()


# ---------------------------------------------------------------- gradient check


def gradient_check(config: ModelConfig | None = None, seed: int = 0, batch: int = 2,
                   step: float = 1e-5, fallback_steps=(1e-4,)) -> float:
    """Max relative error of the model's MSE-loss gradient against central
    differences, over every parameter element, on a random batch."""
    model = TransformerModel.init(config or ModelConfig(), seed=seed)
    cfg = model.config
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, cfg.input_len, cfg.n_features))
    y = rng.normal(scale=0.1, size=(batch, cfg.output_len))
    return nc.finite_diff_check(lambda: nc.mse_loss(model.forward(x, collect_attention=False)[0], y),
                                model.parameters(), step, fallback_steps)
