"""The set-consensus network: encoder blocks, heads, forward pass, checkpoints.

Three consensus blocks run in sequence.  Each block encodes the current point
set with permutation-equivariant set layers (elementwise linear + linear of
the set mean), SoftPlus, layer norm, and residual pairs; a noise head predicts
per-point displacements whose subtraction denoises the points, and a
classification head emits inlier probabilities and weights.  The final
block's outputs feed the confidence normalization and the weighted DLT head.

Parameters live in a flat name -> Tensor mapping (see init_params for the
naming scheme); weights are stored (d_in, d_out) so the forward pass is plain
row-matrix multiplication.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tape, Tensor
from .dlt import DltSolution
from .errors import ConfigError, IncompatibleConfig, InsufficientPoints, IoError, VersionMismatch

CHECKPOINT_MAGIC = b"NACN"
CHECKPOINT_VERSION = 1

PRUNE_OFF = "off"
PRUNE_HALVE = "halve-per-block"


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters; width 512 is full scale, 64 desk scale."""

    width: int = 512
    blocks: int = 3
    layers_per_block: int = 12
    head: str = "essential"  # "essential" or "line2d"
    dtype: str = "float32"

    def __post_init__(self):
        if self.head not in ("essential", "line2d"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        if self.layers_per_block % 2 != 0 or self.layers_per_block < 2:
            raise ConfigError("layers_per_block must be even and >= 2")

    @property
    def input_dim(self) -> int:
        return 4 if self.head == "essential" else 2

    @property
    def min_points(self) -> int:
        return 8 if self.head == "essential" else 2

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**{"width": 64, **overrides})


@dataclass
class ModelParams:
    """A model configuration plus its named parameter tensors."""

    config: ModelConfig
    tensors: dict[str, Tensor]

    def astype(self, dtype: str) -> "ModelParams":
        """Copy with all tensors cast to float32/float64."""
        cfg = replace(self.config, dtype=dtype)
        return ModelParams(cfg, {
            name: Tensor(t.data.astype(cfg.np_dtype), requires_grad=t.requires_grad)
            for name, t in self.tensors.items()
        })

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in self.tensors.items()
        })


def _param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d = config.width
    half = d // 2
    k = config.input_dim
    shapes: dict[str, tuple] = {}
    for b in range(config.blocks):
        for i in range(config.layers_per_block):
            d_in = k if i == 0 else d
            shapes[f"b{b}.l{i}.elem"] = (d_in, d)
            shapes[f"b{b}.l{i}.agg"] = (d_in, d)
            shapes[f"b{b}.l{i}.bias"] = (1, d)
            shapes[f"b{b}.l{i}.ln_gain"] = (1, d)
            shapes[f"b{b}.l{i}.ln_offset"] = (1, d)
        shapes[f"b{b}.proj"] = (k, d)
        shapes[f"b{b}.noise.w1"] = (d, half)
        shapes[f"b{b}.noise.b1"] = (1, half)
        shapes[f"b{b}.noise.w2"] = (half, k)
        shapes[f"b{b}.noise.b2"] = (1, k)
        shapes[f"b{b}.cls.w1"] = (d, half)
        shapes[f"b{b}.cls.b1"] = (1, half)
        shapes[f"b{b}.cls.w2y"] = (half, 1)
        shapes[f"b{b}.cls.b2y"] = (1, 1)
        shapes[f"b{b}.cls.w2w"] = (half, 1)
        shapes[f"b{b}.cls.b2w"] = (1, 1)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization.

    Weight matrices draw uniform(-1/sqrt(d_in), 1/sqrt(d_in)); biases, layer
    norm offsets, and the final layers of both heads start at zero (so the
    model begins as delta = 0, y_hat = 0.5, w = 0); layer norm gains at one.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    dtype = config.np_dtype
    tensors: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config).items():
        leafname = name.rsplit(".", 1)[-1]
        if leafname in ("elem", "agg", "proj", "w1"):
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, shape)
        elif leafname == "ln_gain":
            data = np.ones(shape)
        else:  # biases, ln offsets, final head layers
            data = np.zeros(shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    return ModelParams(config, tensors)


def noise_head_names(config: ModelConfig) -> list[str]:
    return [n for n in _param_shapes(config) if ".noise." in n]


def set_layer(tape: Tape, features: Tensor, elem: Tensor, agg: Tensor, bias: Tensor) -> Tensor:
    """out_i = f_i @ elem + mean_j(f_j) @ agg + bias (weights stored d_in x d_out)."""
    pooled = tape.add(tape.matmul(tape.mean_rows(features), agg), bias)
    return tape.add_row(tape.matmul(features, elem), pooled)


def _mlp2(tape, x, w1, b1, w2, b2, activation):
    h = activation(tape.add_row(tape.matmul(x, w1), b1))
    return tape.add_row(tape.matmul(h, w2), b2)


@dataclass
class BlockTensors:
    latent: Tensor
    x_hat: Tensor
    y_hat: Tensor           # (n, 1) inlier probabilities
    w: Tensor               # (n, 1) raw weights
    delta: Tensor | None    # None when the noise head is muted


def nac_block(
    tape: Tape,
    x_in: Tensor,
    latent_in: Tensor | None,
    params: ModelParams,
    block: int,
    mute_noise: bool = False,
) -> BlockTensors:
    """One consensus block: encoder, noise head, classification head.

    The previous block's latent is added to the first layer's normalized
    output; residual pairs follow, with a learned projection shortcut
    bridging the width change on the first pair.
    """
    t = params.tensors
    p = f"b{block}"

    def encoded(i, x):
        h = set_layer(tape, x, t[f"{p}.l{i}.elem"], t[f"{p}.l{i}.agg"], t[f"{p}.l{i}.bias"])
        h = tape.softplus(h)
        return tape.layer_norm(h, t[f"{p}.l{i}.ln_gain"], t[f"{p}.l{i}.ln_offset"])

    h = encoded(0, x_in)
    if latent_in is not None:
        h = tape.add(h, latent_in)
    h = encoded(1, h)
    res = tape.add(h, tape.matmul(x_in, t[f"{p}.proj"]))
    for pair in range(1, params.config.layers_per_block // 2):
        h = encoded(2 * pair, res)
        h = encoded(2 * pair + 1, h)
        res = tape.add(h, res)
    latent = res

    if mute_noise:
        delta = None
        x_hat = x_in
    else:
        delta = _mlp2(
            tape, latent,
            t[f"{p}.noise.w1"], t[f"{p}.noise.b1"],
            t[f"{p}.noise.w2"], t[f"{p}.noise.b2"],
            tape.leaky_relu,
        )
        x_hat = tape.sub(x_in, delta)

    hidden = tape.softplus(tape.add_row(tape.matmul(latent, t[f"{p}.cls.w1"]), t[f"{p}.cls.b1"]))
    y_hat = tape.sigmoid(tape.add_row(tape.matmul(hidden, t[f"{p}.cls.w2y"]), t[f"{p}.cls.b2y"]))
    w = tape.add_row(tape.matmul(hidden, t[f"{p}.cls.w2w"]), t[f"{p}.cls.b2w"])
    return BlockTensors(latent, x_hat, y_hat, w, delta)


@dataclass(frozen=True)
class ForwardOptions:
    mute_noise: bool = False
    prune: str = PRUNE_OFF          # evaluation-only ablation
    all_blocks: bool = False        # keep per-block model estimates (stage-1 loss)


@dataclass
class ForwardTensors:
    """Tape-level forward results; arrays stay attached to the recording."""

    blocks: list[BlockTensors]
    confidence: Tensor              # (n, 1), final block
    model: Tensor                   # (9, 1) or (3, 1) unit vector
    solution: DltSolution
    per_block_models: list[tuple[Tensor, DltSolution]] | None
    keep_indices: np.ndarray        # original indices surviving pruning
    fallback_uniform: bool


def _model_head(tape, config, x_hat, y_hat, w):
    c = tape.confidence(y_hat, w)
    fallback = bool(tape.notes) and tape.notes[-1] == "confidence_fallback_uniform"
    if config.head == "essential":
        vec, sol = tape.essential_dlt(x_hat, c)
    else:
        vec, sol = tape.line_fit(x_hat, c)
    return c, vec, sol, fallback


def forward_on_tape(
    tape: Tape,
    x: Tensor,
    params: ModelParams,
    options: ForwardOptions = ForwardOptions(),
) -> ForwardTensors:
    config = params.config
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise InsufficientPoints(f"expected (n, {config.input_dim}) input, got {x.shape}")
    if n < config.min_points:
        raise InsufficientPoints(f"need at least {config.min_points} points, got {n}")
    if options.prune not in (PRUNE_OFF, PRUNE_HALVE):
        raise ConfigError(f"unknown prune mode {options.prune!r}")
    pruning = options.prune == PRUNE_HALVE
    if pruning and any(t.requires_grad for t in params.tensors.values()):
        raise ConfigError("pruning is an evaluation-only ablation; detach parameters first")

    keep = np.arange(n)
    blocks: list[BlockTensors] = []
    per_block_models = [] if options.all_blocks else None
    x_cur, latent = x, None
    for b in range(config.blocks):
        out = nac_block(tape, x_cur, latent, params, b, mute_noise=options.mute_noise)
        blocks.append(out)
        last = b == config.blocks - 1
        if options.all_blocks and not last:
            per_block_models.append(_model_head(tape, config, out.x_hat, out.y_hat, out.w)[1:3])
        if pruning and not last:
            m = out.x_hat.shape[0]
            drop = int(np.ceil(m / 2))
            if m - drop < config.min_points:
                raise InsufficientPoints("pruning left fewer points than the head needs")
            order = np.argsort(-out.y_hat.data.ravel(), kind="stable")
            survivors = np.sort(order[: m - drop])
            keep = keep[survivors]
            x_cur = Tensor(out.x_hat.data[survivors])
            latent = Tensor(out.latent.data[survivors])
        else:
            x_cur = out.x_hat
            latent = out.latent

    final = blocks[-1]
    c, vec, sol, fallback = _model_head(tape, config, final.x_hat, final.y_hat, final.w)
    if options.all_blocks:
        per_block_models.append((vec, sol))
    return ForwardTensors(blocks, c, vec, sol, per_block_models, keep, fallback)


@dataclass
class NetOutput:
    """Per-point predictions and the model estimate, as plain arrays.

    With pruning enabled, rows dropped before the final block carry the
    predictions of the block that dropped them and confidence zero.
    """

    x_hat: np.ndarray
    delta: np.ndarray
    y_hat: np.ndarray
    w: np.ndarray
    c: np.ndarray
    e_vec: np.ndarray
    solution: DltSolution
    fallback_uniform: bool
    per_block: list[dict] | None = None

    @property
    def e_hat(self) -> np.ndarray:
        """Raw 3x3 model estimate (row-major; only for the essential head)."""
        return self.e_vec.reshape(3, 3)

    @property
    def line(self) -> np.ndarray:
        """Line (a, b, c) scaled so the normal (a, b) is unit length."""
        v = self.e_vec
        return v / np.hypot(v[0], v[1])


def nacnet_forward(
    x: np.ndarray, params: ModelParams, options: ForwardOptions = ForwardOptions()
) -> NetOutput:
    """Inference entry point: numpy in, numpy out, nothing recorded."""
    config = params.config
    x = np.asarray(x, dtype=config.np_dtype)
    frozen = params
    if any(t.requires_grad for t in params.tensors.values()):
        frozen = ModelParams(config, {
            name: Tensor(t.data) for name, t in params.tensors.items()
        })
    tape = Tape()
    fwd = forward_on_tape(tape, Tensor(x), frozen, options)

    n = x.shape[0]
    final = fwd.blocks[-1]
    if len(fwd.keep_indices) == n:
        x_hat = final.x_hat.data.copy()
        y_hat = final.y_hat.data.ravel().copy()
        w = final.w.data.ravel().copy()
        c = fwd.confidence.data.ravel().copy()
    else:
        # Scatter survivors back; dropped rows keep the predictions of the
        # block that saw them last.
        x_hat = np.empty_like(x)
        y_hat = np.empty(n, dtype=x.dtype)
        w = np.empty(n, dtype=x.dtype)
        c = np.zeros(n, dtype=x.dtype)
        alive = np.arange(n)
        for b, out in enumerate(fwd.blocks):
            x_hat[alive] = out.x_hat.data
            y_hat[alive] = out.y_hat.data.ravel()
            w[alive] = out.w.data.ravel()
            if b < len(fwd.blocks) - 1:
                m = len(alive)
                drop = int(np.ceil(m / 2))
                order = np.argsort(-out.y_hat.data.ravel(), kind="stable")
                alive = alive[np.sort(order[: m - drop])]
        c[fwd.keep_indices] = fwd.confidence.data.ravel()
    delta = x - x_hat
    per_block = None
    if fwd.per_block_models is not None:
        per_block = [
            {"e_vec": vec.data.ravel().copy(), "solution": sol}
            for vec, sol in fwd.per_block_models
        ]
    return NetOutput(
        x_hat=x_hat, delta=delta, y_hat=y_hat, w=w, c=c,
        e_vec=fwd.model.data.ravel().copy(), solution=fwd.solution,
        fallback_uniform=fwd.fallback_uniform, per_block=per_block,
    )


# -- checkpoint container -----------------------------------------------------

def _config_block(config: ModelConfig, extra: dict[str, str]) -> bytes:
    entries = {
        "width": str(config.width),
        "blocks": str(config.blocks),
        "layers_per_block": str(config.layers_per_block),
        "head": config.head,
        "dtype": config.dtype,
    }
    for key, value in extra.items():
        if key in entries:
            raise ValueError(f"extra config key {key!r} collides with the model config")
        entries[key] = str(value)
    text = "".join(f"{k}={entries[k]}\n" for k in sorted(entries))
    return text.encode("utf-8")


def save_params(path, params: ModelParams, extra: dict[str, str] | None = None) -> None:
    """Write the binary checkpoint container (named float32 LE arrays)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = _config_block(params.config, extra or {})
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, tensor in params.tensors.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise IoError("checkpoint truncated")
    return data


def load_params(path) -> tuple[ModelParams, dict[str, str]]:
    """Read a checkpoint; returns the model and any extra config entries."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    with fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise IoError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        entries = {}
        for line in _read_exact(fh, cfg_len).decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            entries[key] = value
        try:
            config = ModelConfig(
                width=int(entries.pop("width")),
                blocks=int(entries.pop("blocks")),
                layers_per_block=int(entries.pop("layers_per_block")),
                head=entries.pop("head"),
                dtype=entries.pop("dtype"),
            )
        except (KeyError, ValueError) as exc:
            raise IncompatibleConfig(f"bad config block: {exc}") from exc
        (n_arrays,) = struct.unpack("<I", _read_exact(fh, 4))
        expected = _param_shapes(config)
        tensors: dict[str, Tensor] = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
            if name not in expected or tuple(shape) != expected[name]:
                raise IncompatibleConfig(f"unexpected array {name} of shape {shape}")
            tensors[name] = Tensor(
                data.astype(config.np_dtype), requires_grad=True
            )
        missing = set(expected) - set(tensors)
        if missing:
            raise IncompatibleConfig(f"checkpoint is missing arrays: {sorted(missing)[:3]}...")
    # Restore canonical parameter order.
    ordered = {name: tensors[name] for name in expected}
    return ModelParams(config, ordered), entries
