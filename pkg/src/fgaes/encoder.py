"""Tiny pre-norm transformer encoder with CLS pooling and two heads.

One head emits a 10-bin aesthetic score distribution (its mean over bins
1..10 is the scalar score); the other projects into the alignment space
used by the comparative-text loss. A deterministic hashed-trigram text
embedder stands in for a learned text encoder, which only ever matters at
training time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .difftoken import TokenSeq, lattice_weights
from .ndiff import Tape, Tensor, constant

__all__ = [
    "EncoderConfig",
    "ModelParams",
    "TapeParams",
    "ScoreOutput",
    "EncoderError",
    "init_params",
    "encode",
    "text_embed",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1
_TEXT_BAG_DIM = 512
_TEXT_PROJECTION_SEED = 0x7E57


class EncoderError(Exception):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    mlp_ratio: int = 4
    pos_grid: int = 14
    n_bins: int = 10
    embed_dim: int = 32
    base_patch: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise EncoderError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.n_layers < 1:
            raise EncoderError("need at least one layer")
        if self.n_bins != 10:
            raise EncoderError("score distribution is fixed at 10 bins")

    @property
    def patch_dim(self) -> int:
        return self.base_patch * self.base_patch * 3


@dataclass
class ScoreOutput:
    dist: Tensor  # (10,) probabilities
    score: Tensor  # scalar in [1, 10]
    embed: Tensor  # (embed_dim,)


class ModelParams:
    """Flat parameter store; every array is addressable by a stable path."""

    def __init__(self, cfg: EncoderConfig, values: dict[str, np.ndarray]):
        self.cfg = cfg
        self.values = values

    def paths(self) -> list[str]:
        return list(self.values.keys())

    def n_params(self) -> int:
        return sum(v.size for v in self.values.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.values.items()})

    def bind(self, tape: Tape) -> "TapeParams":
        return TapeParams(self.cfg, {k: tape.leaf(v) for k, v in self.values.items()})


class TapeParams:
    """ModelParams registered as leaves on one tape."""

    def __init__(self, cfg: EncoderConfig, bound: dict[str, Tensor]):
        self.cfg = cfg
        self.bound = bound

    def __getitem__(self, path: str) -> Tensor:
        return self.bound[path]

    def leaf_node(self, path: str) -> int:
        return self.bound[path].node


def _param_specs(cfg: EncoderConfig):
    d, g, e, pd = cfg.d_model, cfg.pos_grid, cfg.embed_dim, cfg.patch_dim
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("patch_proj.w", (pd, d), "linear"),
        ("patch_proj.b", (d,), "zeros"),
        ("pos_grid", (g, g, d), "small"),
        ("cls", (d,), "small"),
    ]
    for i in range(cfg.n_layers):
        p = f"block{i}."
        specs += [
            (p + "ln1.g", (d,), "ones"),
            (p + "ln1.b", (d,), "zeros"),
            (p + "attn.wq", (d, d), "linear"),
            (p + "attn.bq", (d,), "zeros"),
            (p + "attn.wk", (d, d), "linear"),
            (p + "attn.bk", (d,), "zeros"),
            (p + "attn.wv", (d, d), "linear"),
            (p + "attn.bv", (d,), "zeros"),
            (p + "attn.wo", (d, d), "linear"),
            (p + "attn.bo", (d,), "zeros"),
            (p + "ln2.g", (d,), "ones"),
            (p + "ln2.b", (d,), "zeros"),
            (p + "mlp.w1", (d, d * cfg.mlp_ratio), "linear"),
            (p + "mlp.b1", (d * cfg.mlp_ratio,), "zeros"),
            (p + "mlp.w2", (d * cfg.mlp_ratio, d), "linear"),
            (p + "mlp.b2", (d,), "zeros"),
        ]
    specs += [
        ("final_ln.g", (d,), "ones"),
        ("final_ln.b", (d,), "zeros"),
        ("head_dist.w", (d, cfg.n_bins), "linear"),
        ("head_dist.b", (cfg.n_bins,), "zeros"),
        ("head_embed.w", (d, e), "linear"),
        ("head_embed.b", (e,), "zeros"),
    ]
    return specs


def init_params(cfg: EncoderConfig) -> ModelParams:
    """Seeded init: linear weights scaled by 1/sqrt(fan_in), norms at identity."""
    rng = np.random.default_rng(cfg.seed)
    values: dict[str, np.ndarray] = {}
    for path, shape, kind in _param_specs(cfg):
        if kind == "linear":
            values[path] = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif kind == "small":
            values[path] = 0.02 * rng.standard_normal(shape)
        elif kind == "ones":
            values[path] = np.ones(shape)
        else:
            values[path] = np.zeros(shape)
    return ModelParams(cfg, values)


def _attention(tape: Tape, x: Tensor, tp: TapeParams, prefix: str) -> Tensor:
    cfg = tp.cfg
    n = x.shape[0]
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

    def heads(name):
        proj = tape.add(tape.matmul(x, tp[f"{prefix}.w{name}"]), tp[f"{prefix}.b{name}"])
        return tape.transpose(tape.reshape(proj, (n, h, dh)), (1, 0, 2))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = tape.mul(tape.matmul(q, tape.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    attn = tape.softmax(scores, axis=-1)
    mixed = tape.reshape(tape.transpose(tape.matmul(attn, v), (1, 0, 2)), (n, cfg.d_model))
    return tape.add(tape.matmul(mixed, tp[f"{prefix}.wo"]), tp[f"{prefix}.bo"])


def encode(tape: Tape, tp: TapeParams, tokens: TokenSeq) -> tuple[Tensor, ScoreOutput]:
    """Run the encoder over a token sequence; returns (CLS feature, heads)."""
    cfg = tp.cfg
    if len(tokens) == 0:
        raise EncoderError("empty token sequence")
    pixels = np.stack([t.pixels.reshape(-1) for t in tokens.tokens])
    if pixels.shape[1] != cfg.patch_dim:
        raise EncoderError(
            f"token patch dim {pixels.shape[1]} does not match config {cfg.patch_dim}"
        )
    x = tape.add(tape.matmul(constant(pixels), tp["patch_proj.w"]), tp["patch_proj.b"])
    weights = lattice_weights(cfg.pos_grid, [(t.u, t.v) for t in tokens.tokens])
    grid_flat = tape.reshape(tp["pos_grid"], (cfg.pos_grid * cfg.pos_grid, cfg.d_model))
    x = tape.add(x, tape.matmul(constant(weights), grid_flat))
    x = tape.concat([tape.reshape(tp["cls"], (1, cfg.d_model)), x], axis=0)

    for i in range(cfg.n_layers):
        p = f"block{i}"
        normed = tape.layer_norm(x, tp[f"{p}.ln1.g"], tp[f"{p}.ln1.b"])
        x = tape.add(x, _attention(tape, normed, tp, f"{p}.attn"))
        normed = tape.layer_norm(x, tp[f"{p}.ln2.g"], tp[f"{p}.ln2.b"])
        hidden = tape.gelu(tape.add(tape.matmul(normed, tp[f"{p}.mlp.w1"]), tp[f"{p}.mlp.b1"]))
        x = tape.add(x, tape.add(tape.matmul(hidden, tp[f"{p}.mlp.w2"]), tp[f"{p}.mlp.b2"]))

    x = tape.layer_norm(x, tp["final_ln.g"], tp["final_ln.b"])
    cls_row = tape.slice(x, (slice(0, 1), slice(None)))
    logits = tape.add(tape.matmul(cls_row, tp["head_dist.w"]), tp["head_dist.b"])
    dist = tape.reshape(tape.softmax(logits, axis=-1), (cfg.n_bins,))
    bins = constant(np.arange(1.0, cfg.n_bins + 1.0))
    score = tape.sum(tape.mul(dist, bins))
    embed = tape.reshape(
        tape.add(tape.matmul(cls_row, tp["head_embed.w"]), tp["head_embed.b"]),
        (cfg.embed_dim,),
    )
    cls_feat = tape.reshape(cls_row, (cfg.d_model,))
    return cls_feat, ScoreOutput(dist=dist, score=score, embed=embed)


def _trigram_bag(text: str) -> np.ndarray:
    bag = np.zeros(_TEXT_BAG_DIM)
    padded = f"  {text.lower()}  "
    for i in range(len(padded) - 2):
        tri = padded[i:i + 3].encode("utf-8")
        slot = int.from_bytes(hashlib.sha256(tri).digest()[:4], "big") % _TEXT_BAG_DIM
        bag[slot] += 1.0
    return bag


_text_projection: np.ndarray | None = None


def _projection() -> np.ndarray:
    global _text_projection
    if _text_projection is None:
        rng = np.random.default_rng(_TEXT_PROJECTION_SEED)
        _text_projection = rng.standard_normal((_TEXT_BAG_DIM, 256))
    return _text_projection


def text_embed(source, embed_dim: int) -> np.ndarray:
    """Deterministic text embedding: precomputed vectors pass through
    L2-normalized; strings map via hashed character trigrams and a fixed
    random projection."""
    if isinstance(source, str):
        if not source:
            raise EncoderError("empty text")
        if embed_dim > 256:
            raise EncoderError("hashed text embeddings support embed_dim <= 256")
        vec = _trigram_bag(source) @ _projection()[:, :embed_dim]
    else:
        vec = np.asarray(source, dtype=np.float64)
        if vec.shape != (embed_dim,):
            raise EncoderError(f"expected vector of length {embed_dim}, got {vec.shape}")
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise EncoderError("zero text embedding")
    return vec / norm


def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned JSON checkpoint with exact float64 round-trip."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.cfg),
        "params": {
            k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
            for k, v in params.values.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise EncoderError(f"unsupported checkpoint version {payload.get('version')!r}")
    cfg = EncoderConfig(**payload["config"])
    values = {
        k: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for k, spec in payload["params"].items()
    }
    expected = {p for p, _, _ in _param_specs(cfg)}
    if set(values) != expected:
        missing = expected - set(values)
        raise EncoderError(f"checkpoint parameter paths do not match config "
                           f"(missing {sorted(missing)[:3]}...)" if missing else
                           "checkpoint has unexpected parameter paths")
    return ModelParams(cfg, values)
