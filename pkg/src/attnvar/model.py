"""Pointer-generator encoder/decoder with an attention refinement gate.

Everything is batched: sources are ``(B, D)`` id arrays with a boolean mask,
decoder states ``(B, H)``. Single examples are batches of one.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import UNK, Batch
from .losses import DecodeTrace

MAGIC = b"ATTNVAR1"
GATE_FORMS = ("content", "broadcast")


class DegenerateGateError(RuntimeError):
    """The refinement gate pushed all attention mass to (numerically) zero."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 200
    emb_dim: int = 32
    hidden: int = 32
    refine: bool = True
    gate_form: str = "content"
    max_source_len: int = 400
    init_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.gate_form not in GATE_FORMS:
            raise ValueError(f"gate_form must be one of {GATE_FORMS}, got {self.gate_form!r}")
        if min(self.vocab_size, self.emb_dim, self.hidden, self.max_source_len) < 1:
            raise ValueError("model sizes must be positive")


def _shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    V, E, H = cfg.vocab_size, cfg.emb_dim, cfg.hidden
    A = 2 * H
    return {
        "embedding": (V, E),
        "enc_fw_wx": (E, 4 * H),
        "enc_fw_wh": (H, 4 * H),
        "enc_fw_b": (4 * H,),
        "enc_bw_wx": (E, 4 * H),
        "enc_bw_wh": (H, 4 * H),
        "enc_bw_b": (4 * H,),
        "init_wh": (2 * H, H),
        "init_bh": (H,),
        "init_wc": (2 * H, H),
        "init_bc": (H,),
        "dec_wx": (E, 4 * H),
        "dec_wh": (H, 4 * H),
        "dec_b": (4 * H,),
        "attn_wh": (2 * H, A),
        "attn_ws": (H, A),
        "attn_b": (A,),
        "attn_v": (A,),
        "aru_wr": (H, 2 * H),
        "aru_ws": (H,),
        "aru_wa": (1,),
        "aru_b": (1,),
        "ptr_wc": (2 * H,),
        "ptr_ws": (H,),
        "ptr_wx": (E,),
        "ptr_b": (1,),
        "out_w": (3 * H, V),
        "out_b": (V,),
    }


class ModelParams:
    """Named learnable tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = _shapes(config)
        if list(tensors) != list(expected):
            raise ValueError("parameter names do not match the model layout")
        for name, t in tensors.items():
            if t.shape != expected[name]:
                raise ValueError(f"{name}: expected shape {expected[name]}, got {t.shape}")
        self.config = config
        self.tensors = tensors

    @classmethod
    def initialize(cls, config: ModelConfig) -> "ModelParams":
        rng = np.random.default_rng(config.seed)
        s = config.init_scale
        tensors = {}
        for name, shape in _shapes(config).items():
            value = rng.uniform(-s, s, size=shape)
            if name.endswith("_b") and name.startswith(("enc_", "dec_")):
                H = config.hidden
                value[H : 2 * H] = 1.0  # forget gate
            tensors[name] = Tensor(value, requires_grad=True, name=name)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()},
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(t.data.astype("<f8").tobytes())
        return h.hexdigest()


# -- checkpoint file -----------------------------------------------------------
def _echo(mapping: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


def save_checkpoint(path, params: ModelParams, vocab_tokens=None, extra: dict | None = None):
    """Write magic, config echo, vocabulary and length-prefixed float64 blocks."""
    echo = {f"model.{k}": v for k, v in asdict(params.config).items()}
    echo.update(extra or {})
    header = _echo(echo).encode("utf-8")
    vocab = "\n".join(vocab_tokens or []).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(header)) + header
    out += struct.pack("<I", len(vocab)) + vocab
    out += struct.pack("<I", len(params.tensors))
    for name, t in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        out += struct.pack("<Q", t.data.size) + t.data.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def _parse_value(text: str, kind):
    if kind is bool:
        return text == "True"
    return kind(text)


class Checkpoint(NamedTuple):
    params: ModelParams
    vocab_tokens: list[str]
    echo: dict[str, str]


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        chunk = buf[pos : pos + n]
        if len(chunk) != n:
            raise ValueError(f"{path}: truncated checkpoint")
        pos += n
        return chunk

    (n,) = struct.unpack("<I", take(4))
    echo = {}
    for line in take(n).decode("utf-8").splitlines():
        key, _, value = line.partition(" = ")
        echo[key] = value
    (n,) = struct.unpack("<I", take(4))
    vocab_text = take(n).decode("utf-8")
    vocab_tokens = vocab_text.split("\n") if vocab_text else []
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    casts = {"int": int, "float": float, "bool": bool, "str": str}
    config = ModelConfig(
        **{k: _parse_value(echo[f"model.{k}"], casts[kinds[k]]) for k in kinds}
    )
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (size,) = struct.unpack("<Q", take(8))
        values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return Checkpoint(ModelParams(config, tensors), vocab_tokens, echo)


# -- encoder -----------------------------------------------------------------
@dataclass
class EncoderStates:
    states: Tensor  # (B, D, 2H)
    features: Tensor  # W_h h_i, (B, D, A)
    mask: np.ndarray  # (B, D) bool
    copy_map: np.ndarray  # (B, D, V + n_oov) one-hot of extended source ids
    init_state: tuple[Tensor, Tensor]

    @property
    def length(self) -> int:
        return self.states.shape[1]


def _lstm(xw: Tensor, wh: Tensor, mask: np.ndarray, hidden: int):
    """Run an LSTM over pre-projected inputs ``xw`` (..., B, D, 4H).

    Leading axes are independent recurrences (the encoder stacks both
    directions there). Past each row's length the state is frozen, so the last
    state is the final valid one.
    """
    D = mask.shape[1]
    lead = xw.shape[:-2]
    h = Tensor(np.zeros(lead + (hidden,)))
    c = Tensor(np.zeros(lead + (hidden,)))
    outs = []
    for t in range(D):
        h_new, c_new = _cell(xw[..., t, :], h, c, wh, hidden)
        m = mask[:, t]
        if m.all():
            h, c = h_new, c_new
        else:
            keep = m[:, None]
            h = ad.where(keep, h_new, h)
            c = ad.where(keep, c_new, c)
        outs.append(h)
    return outs, h, c


def _cell(x_proj: Tensor, h: Tensor, c: Tensor, wh: Tensor, H: int):
    z = x_proj + h @ wh
    sg = ad.sigmoid(z)
    th = ad.tanh(z)
    c = sg[..., H : 2 * H] * c + sg[..., :H] * th[..., 2 * H : 3 * H]
    h = sg[..., 3 * H :] * ad.tanh(c)
    return h, c


def _as_batch(ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    return ids[None, :] if ids.ndim == 1 else ids


def encode(params: ModelParams, source_ids, mask=None, source_ext=None, n_oov: int = 0) -> EncoderStates:
    """Bidirectional LSTM over UNKed source ids plus the decoder's initial state."""
    cfg = params.config
    ids = _as_batch(source_ids)
    B, D = ids.shape
    if D == 0:
        raise ValueError("encode: empty source")
    if D > cfg.max_source_len:
        raise ValueError(f"encode: source length {D} exceeds max_source_len {cfg.max_source_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("encode: source ids must be in [0, V); map OOVs to UNK first")
    mask = np.ones((B, D), dtype=bool) if mask is None else _as_batch(mask).astype(bool)
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ValueError("encode: empty source")
    ext = ids if source_ext is None else _as_batch(source_ext)
    H = cfg.hidden

    x = params["embedding"][ids]
    # reverse each row within its own length; the index map is an involution
    t = np.arange(D)[None, :]
    rev = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    rows = np.arange(B)[:, None]
    xw = ad.stack(
        [
            x @ params["enc_fw_wx"] + params["enc_fw_b"],
            (x @ params["enc_bw_wx"] + params["enc_bw_b"])[rows, rev],
        ]
    )
    wh = ad.stack([params["enc_fw_wh"], params["enc_bw_wh"]])
    outs, h_last, c_last = _lstm(xw, wh, mask, H)
    both = ad.stack(outs, axis=2)  # (2, B, D, H)
    states = ad.concat([both[0], both[1][rows, rev]], axis=-1)

    h0 = ad.tanh(ad.concat([h_last[0], h_last[1]], axis=-1) @ params["init_wh"] + params["init_bh"])
    c0 = ad.tanh(ad.concat([c_last[0], c_last[1]], axis=-1) @ params["init_wc"] + params["init_bc"])

    vext = cfg.vocab_size + n_oov
    if ext[mask].max() >= vext:
        raise ValueError("encode: extended source id outside V + n_oov")
    copy_map = np.zeros((B, D, vext))
    copy_map[rows, t, np.where(mask, ext, 0)] = 1.0
    copy_map *= mask[:, :, None]
    return EncoderStates(states, states @ params["attn_wh"], mask, copy_map, (h0, c0))


# -- attention, refinement, context ----------------------------------------------
def attention_step(s: Tensor, enc: EncoderStates, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Additive attention: logits e_t and their masked softmax a_t."""
    dec = s @ params["attn_ws"] + params["attn_b"]
    B = dec.shape[0]
    e = ad.tanh(enc.features + dec.reshape(B, 1, -1)) @ params["attn_v"]
    return e, ad.softmax(e, mask=enc.mask)


def refine_attention(
    s: Tensor,
    a: Tensor,
    enc: EncoderStates,
    params: ModelParams,
    gate_form: str | None = None,
    gate: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Gate the attention with the decoder state.

    Returns (gate r_t, damped a_t^r = r_t * a_t, renormalised attention).
    ``gate`` bypasses the learned gate, e.g. to force an identity gate.
    """
    if gate is None:
        form = gate_form or params.config.gate_form
        B, D = a.shape
        if form == "content":
            q = (s @ params["aru_wr"]).reshape(B, -1, 1)
            state_term = (enc.states @ q).reshape(B, D)
        elif form == "broadcast":
            state_term = (s @ params["aru_ws"]).reshape(B, 1)
        else:
            raise ValueError(f"unknown gate form {form!r}")
        gate = ad.sigmoid(state_term + params["aru_wa"] * a + params["aru_b"])
    damped = gate * a
    total = damped.sum(axis=-1, keepdims=True)
    if np.any(total.data < 1e-12):
        raise DegenerateGateError("refined attention mass fell below 1e-12")
    return gate, damped, damped / total


def context_vector(weights: Tensor, enc: EncoderStates) -> Tensor:
    B, D = weights.shape
    return (weights.reshape(B, 1, D) @ enc.states).reshape(B, -1)


# -- decoder step ---------------------------------------------------------------
@dataclass
class AttentionRecord:
    raw: Tensor  # a_t
    gate: Tensor  # r_t
    refined: Tensor  # a_t^r
    renormed: Tensor  # ã_t


@dataclass
class DecodeStepOutput:
    state: tuple[Tensor, Tensor]
    attention: AttentionRecord
    context: Tensor
    p_gen: Tensor  # (B, 1)
    vocab_dist: Tensor  # (B, V)
    final_dist: Tensor  # (B, V + n_oov)


def _step(params, x_emb, x_proj, state, enc, p_gen=None, gate=None) -> DecodeStepOutput:
    cfg = params.config
    h, c = _cell(x_proj, state[0], state[1], params["dec_wh"], cfg.hidden)
    _, a = attention_step(h, enc, params)
    if cfg.refine or gate is not None:
        r, ar, at = refine_attention(h, a, enc, params, gate=gate)
    else:
        r, ar, at = Tensor(np.ones(a.shape)), a, a
    ctx = context_vector(at, enc)
    B = h.shape[0]
    pv = ad.softmax(ad.concat([h, ctx], axis=-1) @ params["out_w"] + params["out_b"])
    if p_gen is None:
        logit = ctx @ params["ptr_wc"] + h @ params["ptr_ws"] + x_emb @ params["ptr_wx"]
        p_gen = ad.sigmoid(logit.reshape(B, 1) + params["ptr_b"])
    else:
        p_gen = ad.as_tensor(np.broadcast_to(np.asarray(p_gen, dtype=np.float64), (B, 1)))
    n_oov = enc.copy_map.shape[2] - cfg.vocab_size
    pv_ext = ad.concat([pv, Tensor(np.zeros((B, n_oov)))], axis=-1) if n_oov else pv
    copy = (at.reshape(B, 1, -1) @ enc.copy_map).reshape(B, -1)
    final = p_gen * pv_ext + (1.0 - p_gen) * copy
    return DecodeStepOutput((h, c), AttentionRecord(a, r, ar, at), ctx, p_gen, pv, final)


def decode_step(
    params: ModelParams,
    prev_ids,
    state: tuple[Tensor, Tensor],
    enc: EncoderStates,
    p_gen=None,
    gate: Tensor | None = None,
) -> DecodeStepOutput:
    """One decoder step from the previous (extended) token ids.

    ``p_gen`` and ``gate`` override the learned generation switch and
    refinement gate; they exist for probing the mixing arithmetic.
    """
    prev = np.atleast_1d(np.asarray(prev_ids, dtype=np.int64))
    prev = np.where(prev >= params.config.vocab_size, UNK, prev)
    x = params["embedding"][prev]
    return _step(params, x, x @ params["dec_wx"] + params["dec_b"], state, enc, p_gen, gate)


# -- teacher-forced pass -------------------------------------------------------------
@dataclass
class ForwardTrace:
    """Stacked per-step quantities of a teacher-forced pass, shapes (B, T, ...)."""

    raw: Tensor
    gate: Tensor
    refined: Tensor
    renormed: Tensor
    gold_logprob: Tensor  # (B, T)
    step_mask: np.ndarray  # (B, T) bool
    source_mask: np.ndarray  # (B, D) bool

    def decode_trace(self) -> DecodeTrace:
        return DecodeTrace(self.refined, self.gold_logprob, self.step_mask, self.source_mask)


def teacher_forced(params: ModelParams, batch: Batch) -> ForwardTrace:
    enc = encode(params, batch.src_ids, batch.src_mask, batch.src_ext, batch.n_oov)
    x = params["embedding"][batch.tgt_in]
    x_proj = x @ params["dec_wx"] + params["dec_b"]
    state = enc.init_state
    B, T = batch.tgt_in.shape
    rows = np.arange(B)
    recs, gold = [], []
    for t in range(T):
        out = _step(params, x[:, t], x_proj[:, t], state, enc)
        state = out.state
        recs.append(out.attention)
        p = out.final_dist[rows, batch.tgt_out[:, t]]
        gold.append(ad.log(ad.clamp_min(p, 1e-12)))
    return ForwardTrace(
        raw=ad.stack([r.raw for r in recs], axis=1),
        gate=ad.stack([r.gate for r in recs], axis=1),
        refined=ad.stack([r.refined for r in recs], axis=1),
        renormed=ad.stack([r.renormed for r in recs], axis=1),
        gold_logprob=ad.stack(gold, axis=1),
        step_mask=batch.tgt_mask,
        source_mask=batch.src_mask,
    )
