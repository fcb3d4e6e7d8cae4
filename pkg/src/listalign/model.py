"""Photo-set transformer encoder and text projection tower.

The set encoder embeds each photo, adds a learned per-position embedding,
runs pre-norm transformer layers whose attention masks padded positions, pools
at the last real photo (or mean-pools over real photos as an ablation), projects
to the output width, and L2-normalizes. The text tower is a stack of affine +
GELU layers with a linear head, also L2-normalized. Both towers produce unit
vectors in the same space; forward_batch pairs them into a cosine logit matrix.

All math runs in float64 through the autodiff tape; layer statistics are always
per example, and padded photo rows cannot influence real positions, so encoding
a listing alone or inside any batch is bit-identical.

Checkpoint format: magic "BLMODEL1", u32 header length, canonical-JSON header
(architecture, freeze flags, parameter manifest), float32 payload in manifest
order, little-endian.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._fileio import Reader, atomic_write_bytes, pack_u32, read_magic
from .autodiff import Tape, Var
from .errors import ConfigError, DegenerateInput, ShapeMismatch

__all__ = [
    "SetEncoderConfig",
    "SetEncoderParams",
    "TextTowerConfig",
    "TextTowerParams",
    "init_set_encoder",
    "init_text_tower",
    "set_text_freeze",
    "encode_photoset",
    "encode_photoset_batch",
    "encode_text",
    "forward_batch",
    "backward",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"BLMODEL1"
LN_EPS = 1e-5
NORM_GUARD = 1e-12
INIT_STD = 0.02
POS_INIT_STD = 0.1


# ---------------------------------------------------------------------------
# configs and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SetEncoderConfig:
    d_in: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_out: int = 64
    p_max: int = 8
    pool: str = "last"  # "last" or "mean"

    def validate(self) -> None:
        if min(self.d_in, self.d_model, self.n_layers, self.n_heads, self.d_out, self.p_max) < 1:
            raise ConfigError("set encoder: all sizes must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"set encoder: d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.pool not in ("last", "mean"):
            raise ConfigError(f"set encoder: unknown pooling {self.pool!r}")


@dataclass
class SetEncoderParams:
    config: SetEncoderConfig
    tensors: dict[str, Var]  # name -> trainable Var, in manifest order

    def named(self):
        return list(self.tensors.items())


@dataclass(frozen=True)
class TextTowerConfig:
    dims: tuple  # (d_text, hidden..., d_out)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def validate(self) -> None:
        if len(self.dims) < 2:
            raise ConfigError("text tower: need at least input and output dims")
        if min(self.dims) < 1:
            raise ConfigError("text tower: all dims must be >= 1")


@dataclass
class TextTowerParams:
    config: TextTowerConfig
    tensors: dict[str, Var]
    frozen: list[bool] = field(default_factory=list)  # per layer

    def named(self):
        return list(self.tensors.items())


def _layer_names(i: int):
    base = f"layer{i}."
    return [
        base + n
        for n in (
            "ln1_g", "ln1_b", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v",
            "w_o", "b_o", "ln2_g", "ln2_b", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
        )
    ]


def init_set_encoder(config: SetEncoderConfig, seed: int = 0) -> SetEncoderParams:
    """Normal(0, 0.02) weights, zero biases, unit layer-norm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    dm, dh = config.d_model, config.d_model
    t: dict[str, Var] = {}

    def w(shape, std=INIT_STD):
        return ad.param(rng.normal(scale=std, size=shape))

    def zeros(shape):
        return ad.param(np.zeros(shape))

    def ones(shape):
        return ad.param(np.ones(shape))

    t["w_in"] = w((config.d_in, dm))
    t["b_in"] = zeros((dm,))
    t["pos_emb"] = w((config.p_max, dm), std=POS_INIT_STD)
    for i in range(config.n_layers):
        names = _layer_names(i)
        vals = [
            ones((dm,)), zeros((dm,)),
            w((dm, dh)), zeros((dh,)), w((dm, dh)), zeros((dh,)), w((dm, dh)), zeros((dh,)),
            w((dm, dm)), zeros((dm,)),
            ones((dm,)), zeros((dm,)),
            w((dm, 4 * dm)), zeros((4 * dm,)), w((4 * dm, dm)), zeros((dm,)),
        ]
        t.update(zip(names, vals))
    t["w_out"] = w((dm, config.d_out))
    t["b_out"] = zeros((config.d_out,))
    return SetEncoderParams(config=config, tensors=t)


def init_text_tower(config: TextTowerConfig, seed: int = 0) -> TextTowerParams:
    config.validate()
    rng = np.random.default_rng(seed)
    t: dict[str, Var] = {}
    for i in range(config.n_layers):
        t[f"text{i}.w"] = ad.param(rng.normal(scale=INIT_STD, size=(config.dims[i], config.dims[i + 1])))
        t[f"text{i}.b"] = ad.param(np.zeros(config.dims[i + 1]))
    return TextTowerParams(config=config, tensors=t, frozen=[False] * config.n_layers)


def set_text_freeze(params: TextTowerParams, unfrozen_layers) -> None:
    """Freeze every text layer except the given indices.

    Frozen tensors stop requiring gradients; the optimizer leaves them (and
    their state) untouched, bit for bit.
    """
    n = params.config.n_layers
    unfrozen = set(unfrozen_layers)
    for i in unfrozen:
        if not 0 <= i < n:
            raise ConfigError(f"text tower has {n} layers, cannot unfreeze layer {i}")
    for i in range(n):
        live = i in unfrozen
        params.frozen[i] = not live
        params.tensors[f"text{i}.w"].requires_grad = live
        params.tensors[f"text{i}.b"].requires_grad = live


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------

def _layer_norm(x: Var, g: Var, b: Var) -> Var:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / ad.sqrt(var + LN_EPS) * g + b


def _l2_normalize_rows(y: Var) -> Var:
    """Unit-normalize rows; rows with norm < 1e-12 become the first basis vector."""
    norms = ad.sqrt((y * y).sum(axis=-1, keepdims=True))
    safe = norms.value >= NORM_GUARD
    if safe.all():
        return y / norms
    denom = norms + ad.constant(np.where(safe, 0.0, 1.0))
    fallback = np.zeros(y.value.shape)
    fallback[..., 0] = 1.0
    mask = safe.astype(np.float64)
    return (y / denom) * mask + ad.constant(fallback * (1.0 - mask))


def _attention(x: Var, mask: np.ndarray, p: SetEncoderParams, i: int) -> Var:
    cfg = p.config
    t = p.tensors
    B, P, dm = x.value.shape
    H = cfg.n_heads
    dh = dm // H
    pre = f"layer{i}."

    def heads(v: Var) -> Var:
        return ad.transpose(v.reshape(B, P, H, dh), (0, 2, 1, 3))

    q = heads(x @ t[pre + "w_q"] + t[pre + "b_q"])
    k = heads(x @ t[pre + "w_k"] + t[pre + "b_k"])
    v = heads(x @ t[pre + "w_v"] + t[pre + "b_v"])
    scores = q @ ad.transpose(k, (0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    scores = scores + ad.constant(mask)  # -inf on padded key positions
    attn = ad.exp(ad.log_softmax(scores, axis=-1))
    ctx = ad.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, P, dm)
    return ctx @ t[pre + "w_o"] + t[pre + "b_o"]


def _encode_photoset_graph(p: SetEncoderParams, photos: np.ndarray, counts: np.ndarray) -> Var:
    """(B, p_max, d_in) padded photo buffers -> (B, d_out) unit rows."""
    cfg = p.config
    t = p.tensors
    B, P, _ = photos.shape
    x = ad.constant(photos) @ t["w_in"] + t["b_in"]
    if cfg.pool == "last":
        # mean pooling is the order-free ablation: no positional table, so the
        # encoder sees the photos as a pure set
        x = x + t["pos_emb"]
    key_mask = np.where(np.arange(P)[None, :] < counts[:, None], 0.0, -np.inf)
    mask4 = key_mask.reshape(B, 1, 1, P)
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        x = x + _attention(_layer_norm(x, t[pre + "ln1_g"], t[pre + "ln1_b"]), mask4, p, i)
        h = _layer_norm(x, t[pre + "ln2_g"], t[pre + "ln2_b"])
        h = ad.gelu(h @ t[pre + "w_ff1"] + t[pre + "b_ff1"]) @ t[pre + "w_ff2"] + t[pre + "b_ff2"]
        x = x + h
    if cfg.pool == "last":
        pooled = x[np.arange(B), counts - 1, :]
    else:
        real = (np.arange(P)[None, :] < counts[:, None]).astype(np.float64)
        pooled = (x * ad.constant(real[:, :, None])).sum(axis=1) / ad.constant(
            counts.astype(np.float64)[:, None]
        )
    out = pooled @ t["w_out"] + t["b_out"]
    return _l2_normalize_rows(out)


def _encode_text_graph(p: TextTowerParams, texts: np.ndarray) -> Var:
    t = p.tensors
    x: Var = ad.constant(texts)
    n = p.config.n_layers
    for i in range(n):
        x = x @ t[f"text{i}.w"] + t[f"text{i}.b"]
        if i < n - 1:
            x = ad.gelu(x)
    return _l2_normalize_rows(x)


def _check_photo_batch(cfg: SetEncoderConfig, photos: np.ndarray, counts: np.ndarray) -> None:
    if photos.ndim != 3 or photos.shape[1] != cfg.p_max or photos.shape[2] != cfg.d_in:
        raise ShapeMismatch(
            f"photos must be (B, {cfg.p_max}, {cfg.d_in}) buffers, got {photos.shape}"
        )
    if counts.shape != (photos.shape[0],):
        raise ShapeMismatch("counts must be one int per photo set")
    if np.any(counts < 1) or np.any(counts > cfg.p_max):
        raise DegenerateInput(f"photo counts must lie in [1, {cfg.p_max}]")
    if not np.isfinite(photos).all():
        raise DegenerateInput("photos contain NaN or Inf")


# ---------------------------------------------------------------------------
# public encoders
# ---------------------------------------------------------------------------

def encode_photoset_batch(p: SetEncoderParams, photos, counts) -> np.ndarray:
    """Encode padded photo buffers (B, p_max, d_in) to unit rows (B, d_out)."""
    photos = np.asarray(photos, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    _check_photo_batch(p.config, photos, counts)
    return _encode_photoset_graph(p, photos, counts).value


def encode_photoset(p: SetEncoderParams, photos, count: int) -> np.ndarray:
    """Encode one photo set. Rows at or past count are ignored; shorter inputs
    are zero-padded up to p_max."""
    photos = np.asarray(photos, dtype=np.float64)
    if photos.ndim != 2 or photos.shape[1] != p.config.d_in:
        raise ShapeMismatch(f"photos must be (P, {p.config.d_in}), got {photos.shape}")
    if not 1 <= count <= min(photos.shape[0], p.config.p_max):
        raise DegenerateInput(
            f"count {count} outside [1, min(rows={photos.shape[0]}, p_max={p.config.p_max})]"
        )
    buf = np.zeros((p.config.p_max, p.config.d_in))
    buf[:count] = photos[:count]
    return encode_photoset_batch(p, buf[None], np.array([count]))[0]


def encode_text(p: TextTowerParams, texts) -> np.ndarray:
    """Encode text feature rows (n, d_text) -> unit rows (n, d_out)."""
    texts = np.asarray(texts, dtype=np.float64)
    single = texts.ndim == 1
    if single:
        texts = texts[None]
    if texts.ndim != 2 or texts.shape[1] != p.config.dims[0]:
        raise ShapeMismatch(f"texts must have {p.config.dims[0]} columns, got {texts.shape}")
    if not np.isfinite(texts).all():
        raise DegenerateInput("texts contain NaN or Inf")
    out = _encode_text_graph(p, texts).value
    return out[0] if single else out


def forward_batch(ps: SetEncoderParams, te: TextTowerParams, photos, counts, texts):
    """Build the paired forward graph for one training batch.

    Returns (logits, tape): logits is a (B, B) Var of cosine similarities,
    logits[i, j] = photoset_i . text_j, recorded on a fresh tape that is still
    open for loss construction (enter it again with ``with tape:``).
    """
    photos = np.asarray(photos, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    texts = np.asarray(texts, dtype=np.float64)
    _check_photo_batch(ps.config, photos, counts)
    if photos.shape[0] < 2:
        raise DegenerateInput("forward_batch: need at least 2 listings")
    if texts.shape[0] != photos.shape[0]:
        raise ShapeMismatch("forward_batch: photos and texts disagree on batch size")
    tape = Tape()
    with tape:
        ps_emb = _encode_photoset_graph(ps, photos, counts)
        text_emb = _encode_text_graph(te, texts)
        logits = ps_emb @ ad.transpose(text_emb, (1, 0))
    return logits, tape


def backward(tape: Tape, loss: Var, *param_groups) -> dict[str, np.ndarray]:
    """Gradients for every tensor in the given parameter groups.

    Frozen or unreached tensors get exact zeros. Consumes the tape.
    """
    raw = ad.backward(tape, loss)
    out: dict[str, np.ndarray] = {}
    for group in param_groups:
        for name, var in group.named():
            if name in out:
                raise ConfigError(f"duplicate parameter name {name!r} across groups")
            grad = raw.get(id(var))
            out[name] = np.zeros_like(var.value) if grad is None else grad
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _manifest(params: SetEncoderParams | TextTowerParams) -> list:
    return [[name, list(var.value.shape)] for name, var in params.named()]


def save_checkpoint(path: str, ps: SetEncoderParams, te: TextTowerParams, extra=None) -> None:
    """Write both towers (and any extra named scalars) as one BLMODEL1 file."""
    extra = extra or {}
    header = {
        "set_encoder": {
            "d_in": ps.config.d_in,
            "d_model": ps.config.d_model,
            "n_layers": ps.config.n_layers,
            "n_heads": ps.config.n_heads,
            "d_out": ps.config.d_out,
            "p_max": ps.config.p_max,
            "pool": ps.config.pool,
        },
        "text_tower": {"dims": list(te.config.dims), "frozen": list(te.frozen)},
        "manifest": _manifest(ps) + _manifest(te) + [[k, list(np.shape(v))] for k, v in extra.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = []
    for _, var in ps.named() + te.named():
        payload.append(np.ascontiguousarray(var.value, dtype="<f4").tobytes())
    for _, v in extra.items():
        payload.append(np.ascontiguousarray(np.asarray(v, dtype=np.float64), dtype="<f4").tobytes())
    atomic_write_bytes(path, CKPT_MAGIC + pack_u32(len(blob)) + blob + b"".join(payload))


def load_checkpoint(path: str):
    """Read a checkpoint: (set encoder params, text tower params, extra dict)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    read_magic(buf, CKPT_MAGIC, path)
    r = Reader(buf, 8)
    header = json.loads(r.raw(r.u32()).decode("utf-8"))
    se = header["set_encoder"]
    ps = init_set_encoder(SetEncoderConfig(**se), seed=0)
    te = init_text_tower(TextTowerConfig(dims=tuple(header["text_tower"]["dims"])), seed=0)
    known = dict(ps.named() + te.named())
    extra = {}
    for name, shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.raw(4 * count), dtype="<f4").astype(np.float64).reshape(shape)
        if name in known:
            known[name].value = arr
        else:
            extra[name] = arr
    frozen = header["text_tower"]["frozen"]
    set_text_freeze(te, [i for i, f in enumerate(frozen) if not f])
    return ps, te, extra
