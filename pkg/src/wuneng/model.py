"""Model assembly: embedding, layer stack, output head, checkpoints.

The unembedding starts at zero so a fresh model emits exactly-zero logits
and its first cross-entropy is ln(vocab) on the dot, a handy anchor for
training-loop tests.

Checkpoint format (all integers little-endian):

    magic   8 bytes  b"WUNENG01"
    version u32      currently 1
    config  u32 length + that many bytes of UTF-8 "key=value\\n" lines
    count   u32      number of tensors
    tensor  u16 name length + name bytes (UTF-8, canonical dotted form)
            u8 rank, then rank * u32 dims
            prod(dims) float64 values, little-endian

Tensors appear in canonical order (the order of :func:`named_params`), and
every parameter appears exactly once. 0-d scalars are stored as shape (1,).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from .attention import AttnHeadParams
from .fusion import CombineMode, FusionConfig, HybridProjection, MiddleHeadParams, MiddleMode
from .layer import LayerParams, init_layer_params, layer_forward
from .numerics import Array, NumericOverflow, Rng, init_glorot
from .state import StateParams

MAGIC = b"WUNENG01"
VERSION = 1


class CheckpointError(Exception):
    """Base for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TensorShapeError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class TokenRangeError(ValueError):
    """A token id falls outside [0, vocab_size)."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_layers: int
    d_ffn: int = 0  # 0 means 4 * d_model
    combine_mode: CombineMode = CombineMode.CONCAT_PROJECT
    middle_mode: MiddleMode = MiddleMode.OFF
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers"):
            if getattr(self, name) < (0 if name == "n_layers" else 1):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ffn == 0:
            object.__setattr__(self, "d_ffn", 4 * self.d_model)

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(self.combine_mode, self.middle_mode)

    def to_lines(self) -> str:
        keys = ("vocab_size", "d_model", "n_heads", "n_layers", "d_ffn",
                "combine_mode", "middle_mode", "seed")
        out = []
        for k in keys:
            v = getattr(self, k)
            out.append(f"{k}={v.value if isinstance(v, Enum) else v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_lines(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        return cls(
            vocab_size=int(kv["vocab_size"]),
            d_model=int(kv["d_model"]),
            n_heads=int(kv["n_heads"]),
            n_layers=int(kv["n_layers"]),
            d_ffn=int(kv["d_ffn"]),
            combine_mode=CombineMode(kv["combine_mode"]),
            middle_mode=MiddleMode(kv["middle_mode"]),
            seed=int(kv["seed"]),
        )


@dataclass
class ModelParams:
    config: ModelConfig
    embed: Array
    unembed: Array
    layers: list[LayerParams]


def init_params(cfg: ModelConfig) -> ModelParams:
    """Deterministic initialization: same config and seed, same bits."""
    rng = Rng(cfg.seed)
    embed = init_glorot(cfg.vocab_size, cfg.d_model, rng)
    unembed = np.zeros((cfg.d_model, cfg.vocab_size))
    layers = [init_layer_params(cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.fusion, rng)
              for _ in range(cfg.n_layers)]
    return ModelParams(config=cfg, embed=embed, unembed=unembed, layers=layers)


def named_params(params: ModelParams):
    """Yield (canonical name, leaf) pairs in serialization order."""
    yield "embed", params.embed
    yield "unembed", params.unembed
    for i, lp in enumerate(params.layers):
        base = f"layer.{i}"
        for h, hp in enumerate(lp.heads):
            pre = f"{base}.attn.head.{h}"
            yield f"{pre}.w_q", hp.w_q
            yield f"{pre}.w_k", hp.w_k
            yield f"{pre}.w_v", hp.w_v
            yield f"{pre}.w_q_state", hp.w_q_state
            yield f"{pre}.lam", hp.lam
        for h, sp in enumerate(lp.state):
            pre = f"{base}.state.head.{h}"
            yield f"{pre}.w_decay", sp.w_decay
            yield f"{pre}.b_decay", sp.b_decay
            yield f"{pre}.w_icl", sp.w_icl
            yield f"{pre}.b_icl", sp.b_icl
            yield f"{pre}.w_kappa", sp.w_kappa
            yield f"{pre}.w_repl", sp.w_repl
            yield f"{pre}.w_sv", sp.w_sv
            yield f"{pre}.w_hat_k", sp.w_hat_k
            yield f"{pre}.alpha", sp.alpha
        if lp.middle is not None:
            for h, mp in enumerate(lp.middle):
                pre = f"{base}.middle.head.{h}"
                yield f"{pre}.w_mid", mp.w_mid
                if mp.w_state_add is not None:
                    yield f"{pre}.w_state_add", mp.w_state_add
                if mp.w_gate is not None:
                    yield f"{pre}.w_gate", mp.w_gate
                yield f"{pre}.beta", mp.beta
                yield f"{pre}.gamma_mid", mp.gamma_mid
        yield f"{base}.proj.w_attn", lp.proj.w_attn
        yield f"{base}.ffn_in", lp.ffn_in
        yield f"{base}.ffn_out", lp.ffn_out
        yield f"{base}.ln1.scale", lp.ln1_scale
        yield f"{base}.ln1.shift", lp.ln1_shift
        yield f"{base}.ln2.scale", lp.ln2_scale
        yield f"{base}.ln2.shift", lp.ln2_shift


def _map_dataclass(obj, fn):
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, (np.ndarray, ad.Var)):
            out[f.name] = fn(v)
        elif isinstance(v, list):
            out[f.name] = [_map_dataclass(item, fn) for item in v]
        elif isinstance(v, (AttnHeadParams, StateParams, MiddleHeadParams,
                            HybridProjection)):
            out[f.name] = _map_dataclass(v, fn)
        else:
            out[f.name] = v
    return replace(obj, **out)


def map_leaves(params: ModelParams, fn) -> ModelParams:
    """Structure-preserving map over every parameter leaf."""
    return _map_dataclass(params, fn)


def lift(params: ModelParams) -> ModelParams:
    """Wrap every leaf in an autodiff Var (reuses the arrays)."""
    return map_leaves(params, lambda a: a if isinstance(a, ad.Var) else ad.Var(a))


def detach(params: ModelParams) -> ModelParams:
    """Copy to plain arrays, dropping any autodiff wrappers."""
    return map_leaves(params, lambda a: np.array(ad.val(a)))


def model_forward(tokens, params: ModelParams):
    """Logits for every position: [n, vocab] or [batch, n, vocab]."""
    ids = np.asarray(tokens)
    if ids.size == 0:
        raise TokenRangeError("empty token sequence")
    if ids.min() < 0 or ids.max() >= params.config.vocab_size:
        raise TokenRangeError(
            f"token ids must lie in [0, {params.config.vocab_size}), "
            f"got range [{ids.min()}, {ids.max()}]")
    h = ad.embedding_lookup(params.embed, ids)
    for i, lp in enumerate(params.layers):
        try:
            h, _ = layer_forward(h, lp)
        except NumericOverflow as e:
            raise NumericOverflow(f"layer {i}: {e}") from e
    return h @ params.unembed


@dataclass
class ParamCount:
    """Float counts split into the plain-attention base and the additions."""

    base: dict[str, int] = field(default_factory=dict)
    additions: dict[str, int] = field(default_factory=dict)

    @property
    def base_total(self) -> int:
        return sum(self.base.values())

    @property
    def additions_total(self) -> int:
        return sum(self.additions.values())

    @property
    def total(self) -> int:
        return self.base_total + self.additions_total

    @property
    def ratio(self) -> float:
        return self.additions_total / self.base_total if self.base_total else 0.0


def count_params(cfg: ModelConfig) -> ParamCount:
    """Closed-form accounting; must equal the serialized float count."""
    d, dk, nh, L = cfg.d_model, cfg.d_k, cfg.n_heads, cfg.n_layers
    base = {
        "embed": cfg.vocab_size * d,
        "unembed": d * cfg.vocab_size,
        "attn_qkv": L * nh * 3 * d * dk,
        "attn_proj_base": L * d * d,
        "ffn": L * (d * cfg.d_ffn + cfg.d_ffn * d),
        "layer_norm": L * 4 * d,
    }
    additions = {
        "query_state_maps": L * nh * dk * dk,   # w_q_state
        "query_state_scalars": L * nh,          # lam
        "state_projections": L * nh * (5 * d * dk + 2 * dk),
        "state_readout": L * nh * (d * dk + 1),  # w_hat_k, alpha
    }
    mid = 0
    if cfg.middle_mode != MiddleMode.OFF:
        mid = nh * (dk * dk + 2)  # w_mid, beta, gamma_mid
        if cfg.middle_mode == MiddleMode.ADDITIVE:
            mid += nh * dk * dk
        if cfg.middle_mode == MiddleMode.GATED:
            mid += nh * 2 * dk * dk
    additions["middle_heads"] = L * mid
    d_cat = cfg.fusion.d_cat(d)
    additions["attn_proj_extra"] = L * (d_cat - d) * d
    return ParamCount(base=base, additions=additions)


def save_checkpoint(path, params: ModelParams) -> None:
    cfg_bytes = params.config.to_lines().encode("utf-8")
    entries = list(named_params(params))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(entries)))
        for name, leaf in entries:
            arr = np.ascontiguousarray(ad.val(leaf), dtype="<f8")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path) -> ModelParams:
    """Read and validate a checkpoint; shapes must match its own config."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise VersionError(f"unsupported version {version}, expected {VERSION}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        cfg = ModelConfig.from_lines(_read_exact(fh, cfg_len, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))

        skeleton = init_params(cfg)
        expected = dict(named_params(skeleton))
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} rank"))
            dims = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"{name} dims"))[0]
                for _ in range(rank))
            if name not in expected:
                raise TensorShapeError(f"unexpected tensor {name!r} for this config")
            want = expected[name].shape
            if dims != want:
                raise TensorShapeError(
                    f"tensor {name!r} has shape {dims}, config expects {want}")
            n_floats = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, 8 * n_floats, f"{name} payload")
            expected[name][...] = np.frombuffer(payload, dtype="<f8").reshape(dims)
            seen.add(name)
        missing = set(expected) - seen
        if missing:
            raise TensorShapeError(f"checkpoint missing tensors: {sorted(missing)}")
    return skeleton
