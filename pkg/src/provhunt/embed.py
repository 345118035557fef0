"""Dual-encoder representation learning for log sequences and intelligence text.

Architecture, per side (log / text):

    tokens -> token-embedding rows -> mean pooling -> x           (dim d)
    h1 = relu(W1 x + b1)                                          (dim d_out)
    g(x) = h1 + relu(W2 h1 + b2)    residual projection           (dim d_out)
    v = g(x) / ||g(x)||

Training minimizes the bidirectional contrastive objective over in-batch
positives/negatives: with logits v_i . u_j / tau,

    loss = (loss_log_to_text + loss_text_to_log) / 2

where each direction is a sum of per-row softmax cross-entropies against the
diagonal. The temperature tau is learnable through tau = exp(rho) so it stays
positive; rho is initialized to ln(0.07).

All gradients are derived by hand and checked against finite differences in
the test suite; the optimizer is plain SGD so every update stays auditable.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import FormatError, TrainingDivergedError
from .pemb import EmbeddingTable, read_pemb

_TOKEN_RE = re.compile(r"[a-z0-9]+")

PARAMS_MAGIC = b"PPRM1"

DEFAULT_TAU_INIT = 0.07


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric boundaries, so paths and
    ip:port strings fall apart into their components."""
    return _TOKEN_RE.findall(text.lower())


def _bucket(token: str, n_buckets: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n_buckets


@dataclass
class EncoderConfig:
    dim: int = 128
    out_dim: int = 128
    hash_buckets: int = 512
    shared_projection: bool = False
    emb_init_scale: float = 0.3


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 1e-5
    dropout: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (in-batch negatives)")
        if self.epochs <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs and learning_rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class ProjectionParams:
    w1: np.ndarray  # (out_dim, dim)
    b1: np.ndarray  # (out_dim,)
    w2: np.ndarray  # (out_dim, out_dim)
    b2: np.ndarray  # (out_dim,)

    def copy(self) -> "ProjectionParams":
        return ProjectionParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy()
        )


@dataclass
class EncoderParams:
    vocab: dict[str, int]
    hash_buckets: int
    emb_log: np.ndarray  # (|vocab| + hash_buckets, dim)
    emb_text: np.ndarray
    proj_log: ProjectionParams
    proj_text: ProjectionParams  # same object as proj_log when shared
    rho: float
    shared_projection: bool = False

    @property
    def tau(self) -> float:
        return float(np.exp(self.rho))

    @property
    def dim(self) -> int:
        return self.emb_log.shape[1]

    @property
    def out_dim(self) -> int:
        return self.proj_log.b1.shape[0]

    def emb(self, side: str) -> np.ndarray:
        _check_side(side)
        return self.emb_log if side == "log" else self.emb_text

    def proj(self, side: str) -> ProjectionParams:
        _check_side(side)
        return self.proj_log if side == "log" else self.proj_text

    def copy(self) -> "EncoderParams":
        proj_log = self.proj_log.copy()
        proj_text = proj_log if self.shared_projection else self.proj_text.copy()
        return EncoderParams(
            vocab=dict(self.vocab),
            hash_buckets=self.hash_buckets,
            emb_log=self.emb_log.copy(),
            emb_text=self.emb_text.copy(),
            proj_log=proj_log,
            proj_text=proj_text,
            rho=self.rho,
            shared_projection=self.shared_projection,
        )


def _check_side(side: str) -> None:
    if side not in ("log", "text"):
        raise ValueError(f"side must be 'log' or 'text', got {side!r}")


def build_vocab(texts: Iterable[str]) -> dict[str, int]:
    """Token -> index map in first-seen order (deterministic for a fixed corpus)."""
    vocab: dict[str, int] = {}
    for text in texts:
        for tok in tokenize(text):
            if tok not in vocab:
                vocab[tok] = len(vocab)
    return vocab


def init_params(
    vocab: dict[str, int], cfg: EncoderConfig, seed: int = 0
) -> EncoderParams:
    rng = np.random.default_rng(seed)
    rows = len(vocab) + cfg.hash_buckets

    def proj() -> ProjectionParams:
        return ProjectionParams(
            w1=rng.normal(0.0, 1.0 / np.sqrt(cfg.dim), size=(cfg.out_dim, cfg.dim)),
            b1=np.zeros(cfg.out_dim),
            w2=rng.normal(0.0, 1.0 / np.sqrt(cfg.out_dim), size=(cfg.out_dim, cfg.out_dim)),
            b2=np.zeros(cfg.out_dim),
        )

    emb_log = rng.normal(0.0, cfg.emb_init_scale, size=(rows, cfg.dim))
    emb_text = rng.normal(0.0, cfg.emb_init_scale, size=(rows, cfg.dim))
    # hash-bucket rows start at zero: a token never seen in training adds
    # nothing to the pooled vector instead of random noise
    emb_log[len(vocab) :] = 0.0
    emb_text[len(vocab) :] = 0.0
    proj_log = proj()
    proj_text = proj_log if cfg.shared_projection else proj()
    return EncoderParams(
        vocab=dict(vocab),
        hash_buckets=cfg.hash_buckets,
        emb_log=emb_log,
        emb_text=emb_text,
        proj_log=proj_log,
        proj_text=proj_text,
        rho=float(np.log(DEFAULT_TAU_INIT)),
        shared_projection=cfg.shared_projection,
    )


def token_ids(tokens: Sequence[str], params: EncoderParams) -> list[int]:
    """Vocab lookup with a deterministic hash-bucket fallback for OOV tokens."""
    base = len(params.vocab)
    out = []
    for tok in tokens:
        idx = params.vocab.get(tok)
        if idx is None:
            idx = base + _bucket(tok, params.hash_buckets)
        out.append(idx)
    return out


# ---------------------------------------------------------------------------
# forward pieces

def encode(tokens: Sequence[str], side: str, params: EncoderParams) -> np.ndarray:
    """Mean of the side's token-embedding rows; the zero vector for no tokens."""
    ids = token_ids(tokens, params)
    emb = params.emb(side)
    if not ids:
        return np.zeros(params.dim)
    return emb[ids].mean(axis=0)


def project(x: np.ndarray, side: str, params: EncoderParams) -> np.ndarray:
    """Two-layer residual projection g(x) = h1 + relu(W2 h1 + b2), h1 = relu(W1 x + b1)."""
    x = np.asarray(x, dtype=np.float64)
    pp = params.proj(side)
    if x.shape != (pp.w1.shape[1],):
        raise ValueError(f"expected input of dim {pp.w1.shape[1]}, got {x.shape}")
    h1 = np.maximum(pp.w1 @ x + pp.b1, 0.0)
    return h1 + np.maximum(pp.w2 @ h1 + pp.b2, 0.0)


def normalize(x: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        return x.copy()
    return x / norm


def embed_text(text: str, side: str, params: EncoderParams) -> np.ndarray:
    """tokenize -> encode -> project -> normalize."""
    return normalize(project(encode(tokenize(text), side, params), side, params))


def embed_corpus(
    texts: Sequence[str],
    side: str,
    params: EncoderParams,
    ids: Sequence[str] | None = None,
) -> EmbeddingTable:
    """Embed every text; output rows align with input order."""
    if ids is None:
        ids = [str(i) for i in range(len(texts))]
    if len(ids) != len(texts):
        raise ValueError("ids must align with texts")
    out = np.zeros((len(texts), params.out_dim))
    for i, text in enumerate(texts):
        out[i] = embed_text(text, side, params)
    return EmbeddingTable(vectors=out, ids=list(ids), normalized=True)


def load_external_embeddings(path: str) -> EmbeddingTable:
    """Load a PEMB1 file produced by any backend; re-normalize raw vectors."""
    table = read_pemb(path)
    vecs = table.vectors.astype(np.float64)
    if not table.normalized:
        norms = np.linalg.norm(vecs, axis=1)
        safe = np.where(norms == 0.0, 1.0, norms)
        vecs = vecs / safe[:, None]
    return EmbeddingTable(vectors=vecs, ids=table.ids, normalized=True)


# ---------------------------------------------------------------------------
# bidirectional contrastive loss

def info_nce_loss(v: np.ndarray, u: np.ndarray, tau: float) -> float:
    """Average of the log->text and text->log contrastive sums.

    Rows must be unit vectors (checked to 1e-6) and v[i] pairs with u[i].
    Reductions run in a canonical (sorted) order so that jointly permuting
    the pairs, or swapping the two modalities, returns a bit-identical value.
    """
    V = np.asarray(v, dtype=np.float64)
    U = np.asarray(u, dtype=np.float64)
    if V.ndim != 2 or V.shape != U.shape:
        raise ValueError("v and u must be equal-shape 2-D arrays")
    if V.shape[0] < 1:
        raise ValueError("need at least one pair")
    if tau <= 0:
        raise ValueError("tau must be positive")
    for name, M in (("v", V), ("u", U)):
        norms = np.linalg.norm(M, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"{name} rows must be unit-normalized (tolerance 1e-6)")
    # elementwise product + fixed-order sum keeps logits bit-symmetric
    logits = (V[:, None, :] * U[None, :, :]).sum(axis=2) / tau
    return 0.5 * (_ce_rows(logits) + _ce_rows(logits.T))


def _ce_rows(s: np.ndarray) -> float:
    m = s.max(axis=1)
    e = np.exp(s - m[:, None])
    lse = m + np.log(np.sort(e, axis=1).sum(axis=1))
    terms = lse - np.diag(s)
    return float(np.sort(terms).sum())


# ---------------------------------------------------------------------------
# training: vectorized forward/backward over a batch of pairs

@dataclass
class _SideCache:
    ids: list[list[int]]
    x: np.ndarray
    z1: np.ndarray
    h1d: np.ndarray  # post-dropout hidden layer
    z2: np.ndarray
    g: np.ndarray
    norms: np.ndarray
    v: np.ndarray
    mask: np.ndarray | None
    keep: float


@dataclass
class Gradients:
    emb_log: tuple[np.ndarray, np.ndarray]  # (unique row ids, per-row grads)
    emb_text: tuple[np.ndarray, np.ndarray]
    proj_log: ProjectionParams
    proj_text: ProjectionParams
    rho: float

    def norms(self) -> dict[str, float]:
        return {
            "emb_log": float(np.linalg.norm(self.emb_log[1])),
            "emb_text": float(np.linalg.norm(self.emb_text[1])),
            "w1_log": float(np.linalg.norm(self.proj_log.w1)),
            "w1_text": float(np.linalg.norm(self.proj_text.w1)),
            "rho": abs(self.rho),
        }


def _forward_side(
    ids_batch: list[list[int]],
    emb: np.ndarray,
    pp: ProjectionParams,
    mask: np.ndarray | None,
    keep: float,
) -> _SideCache:
    n = len(ids_batch)
    d = emb.shape[1]
    x = np.zeros((n, d))
    for i, ids in enumerate(ids_batch):
        if ids:
            x[i] = emb[ids].mean(axis=0)
    z1 = x @ pp.w1.T + pp.b1
    h1 = np.maximum(z1, 0.0)
    h1d = h1 * mask / keep if mask is not None else h1
    z2 = h1d @ pp.w2.T + pp.b2
    g = h1d + np.maximum(z2, 0.0)
    norms = np.linalg.norm(g, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    v = g / safe[:, None]
    return _SideCache(ids=ids_batch, x=x, z1=z1, h1d=h1d, z2=z2, g=g, norms=safe, v=v, mask=mask, keep=keep)


def _backward_side(
    cache: _SideCache, pp: ProjectionParams, dv: np.ndarray, emb_dim: int
) -> tuple[ProjectionParams, np.ndarray, np.ndarray]:
    """Returns (projection grads, unique emb row ids, per-row emb grads)."""
    dg = (dv - (dv * cache.v).sum(axis=1, keepdims=True) * cache.v) / cache.norms[:, None]
    dz2 = dg * (cache.z2 > 0)
    dw2 = dz2.T @ cache.h1d
    db2 = dz2.sum(axis=0)
    dh1d = dg + dz2 @ pp.w2
    dh1 = dh1d * cache.mask / cache.keep if cache.mask is not None else dh1d
    dz1 = dh1 * (cache.z1 > 0)
    dw1 = dz1.T @ cache.x
    db1 = dz1.sum(axis=0)
    dx = dz1 @ pp.w1

    all_ids: list[int] = []
    rows: list[np.ndarray] = []
    for i, ids in enumerate(cache.ids):
        if not ids:
            continue
        contrib = dx[i] / len(ids)
        for idx in ids:
            all_ids.append(idx)
            rows.append(contrib)
    if all_ids:
        uids, inverse = np.unique(np.array(all_ids), return_inverse=True)
        acc = np.zeros((len(uids), emb_dim))
        np.add.at(acc, inverse, np.array(rows))
    else:
        uids = np.zeros(0, dtype=int)
        acc = np.zeros((0, emb_dim))
    return ProjectionParams(dw1, db1, dw2, db2), uids, acc


def pair_loss_and_grads(
    params: EncoderParams,
    log_ids: list[list[int]],
    text_ids: list[list[int]],
    dropout_masks: tuple[np.ndarray, np.ndarray] | None = None,
    dropout: float = 0.0,
) -> tuple[float, Gradients]:
    """Loss and analytic gradients for one batch of (log, text) pairs."""
    keep = 1.0 - dropout
    mlog, mtext = dropout_masks if dropout_masks is not None else (None, None)
    cl = _forward_side(log_ids, params.emb_log, params.proj_log, mlog, keep)
    ct = _forward_side(text_ids, params.emb_text, params.proj_text, mtext, keep)
    tau = params.tau

    a = cl.v @ ct.v.T  # raw similarity matrix
    s = a / tau
    n = s.shape[0]
    l2t = _ce_rows_fast(s)
    t2l = _ce_rows_fast(s.T)
    loss = 0.5 * (l2t + t2l)

    p = _softmax_rows(s)
    q = _softmax_rows(s.T)
    eye = np.eye(n)
    ds = 0.5 * ((p - eye) + (q - eye).T)
    da = ds / tau
    dv = da @ ct.v
    du = da.T @ cl.v
    drho = float(-(ds * a).sum() / tau)

    gl, uid_l, acc_l = _backward_side(cl, params.proj_log, dv, params.dim)
    gt, uid_t, acc_t = _backward_side(ct, params.proj_text, du, params.dim)
    return loss, Gradients(
        emb_log=(uid_l, acc_l),
        emb_text=(uid_t, acc_t),
        proj_log=gl,
        proj_text=gt,
        rho=drho,
    )


def pair_loss(
    params: EncoderParams, log_ids: list[list[int]], text_ids: list[list[int]]
) -> float:
    """Pure forward pass (no dropout); the function finite differences probe."""
    cl = _forward_side(log_ids, params.emb_log, params.proj_log, None, 1.0)
    ct = _forward_side(text_ids, params.emb_text, params.proj_text, None, 1.0)
    s = (cl.v @ ct.v.T) / params.tau
    return 0.5 * (_ce_rows_fast(s) + _ce_rows_fast(s.T))


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=1, keepdims=True)


def _ce_rows_fast(s: np.ndarray) -> float:
    m = s.max(axis=1)
    lse = m + np.log(np.exp(s - m[:, None]).sum(axis=1))
    return float((lse - np.diag(s)).sum())


@dataclass
class TrainResult:
    params: EncoderParams
    epoch_losses: list[float] = field(default_factory=list)


def _pair_texts(pair) -> tuple[str, str]:
    if hasattr(pair, "sequence_text"):
        return pair.sequence_text, pair.intel_text
    seq, intel = pair[0], pair[1]
    return seq, intel


def train(
    pairs: Sequence,
    cfg: TrainConfig,
    params_init: EncoderParams | None = None,
    encoder_cfg: EncoderConfig | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """SGD over shuffled batches with in-batch negatives.

    Deterministic given cfg.seed: initialization, shuffling and dropout all
    draw from one seeded generator. Raises TrainingDivergedError on NaN loss.
    """
    cfg.validate()
    texts = [_pair_texts(p) for p in pairs]
    if len(texts) < cfg.batch_size:
        raise ValueError(
            f"need at least batch_size={cfg.batch_size} pairs, got {len(texts)}"
        )
    rng = np.random.default_rng(cfg.seed)
    if params_init is None:
        vocab = build_vocab(t for pair in texts for t in pair)
        params = init_params(vocab, encoder_cfg or EncoderConfig(), seed=cfg.seed)
    else:
        params = params_init.copy()

    # tokenize each distinct text once
    id_cache: dict[str, list[int]] = {}
    for seq, intel in texts:
        for t in (seq, intel):
            if t not in id_cache:
                id_cache[t] = token_ids(tokenize(t), params)

    n = len(texts)
    out_dim = params.out_dim
    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        seen = 0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            if len(batch) < 2:
                continue
            log_ids = [id_cache[texts[i][0]] for i in batch]
            text_ids = [id_cache[texts[i][1]] for i in batch]
            if cfg.dropout > 0.0:
                keep = 1.0 - cfg.dropout
                masks = (
                    (rng.random((len(batch), out_dim)) < keep).astype(float),
                    (rng.random((len(batch), out_dim)) < keep).astype(float),
                )
            else:
                masks = None
            loss, grads = pair_loss_and_grads(
                params, log_ids, text_ids, dropout_masks=masks, dropout=cfg.dropout
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, batch_no, params.tau, grads.norms())
            _sgd_update(params, grads, cfg.learning_rate)
            total += loss
            seen += len(batch)
        epoch_losses.append(total / max(seen, 1))
        if progress is not None:
            progress(epoch, epoch_losses[-1])
    return TrainResult(params=params, epoch_losses=epoch_losses)


def _sgd_update(params: EncoderParams, grads: Gradients, lr: float) -> None:
    uids, acc = grads.emb_log
    if len(uids):
        params.emb_log[uids] -= lr * acc
    uids, acc = grads.emb_text
    if len(uids):
        params.emb_text[uids] -= lr * acc
    sides = [(params.proj_log, grads.proj_log)]
    if params.shared_projection:
        sides.append((params.proj_log, grads.proj_text))
    else:
        sides.append((params.proj_text, grads.proj_text))
    for pp, gg in sides:
        pp.w1 -= lr * gg.w1
        pp.b1 -= lr * gg.b1
        pp.w2 -= lr * gg.w2
        pp.b2 -= lr * gg.b2
    params.rho -= lr * grads.rho


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic "PPRM1", u32 version, u32 header length, JSON header,
#   then raw float64 little-endian arrays in a fixed order.

def save_params(path: str, params: EncoderParams) -> None:
    header = {
        "dim": params.dim,
        "out_dim": params.out_dim,
        "hash_buckets": params.hash_buckets,
        "shared_projection": params.shared_projection,
        "rows": params.emb_log.shape[0],
        "vocab": params.vocab,
    }
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    arrays = [params.emb_log, params.emb_text]
    arrays += [params.proj_log.w1, params.proj_log.b1, params.proj_log.w2, params.proj_log.b2]
    if not params.shared_projection:
        arrays += [
            params.proj_text.w1,
            params.proj_text.b1,
            params.proj_text.w2,
            params.proj_text.b2,
        ]
    arrays.append(np.array([params.rho]))
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<II", 1, len(raw)))
        f.write(raw)
        for arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path: str) -> EncoderParams:
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:5]!r}")
    version, hlen = struct.unpack_from("<II", data, 5)
    if version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 13
    header = json.loads(data[offset : offset + hlen].decode("utf-8"))
    offset += hlen

    def take(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + count * 8
        if end > len(data):
            raise FormatError(f"{path}: truncated array block")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        offset = end
        return arr.reshape(shape).copy()

    d, o, rows = header["dim"], header["out_dim"], header["rows"]
    emb_log = take((rows, d))
    emb_text = take((rows, d))
    proj_log = ProjectionParams(take((o, d)), take((o,)), take((o, o)), take((o,)))
    if header["shared_projection"]:
        proj_text = proj_log
    else:
        proj_text = ProjectionParams(take((o, d)), take((o,)), take((o, o)), take((o,)))
    rho = float(take((1,))[0])
    return EncoderParams(
        vocab={str(k): int(v) for k, v in header["vocab"].items()},
        hash_buckets=int(header["hash_buckets"]),
        emb_log=emb_log,
        emb_text=emb_text,
        proj_log=proj_log,
        proj_text=proj_text,
        rho=rho,
        shared_projection=bool(header["shared_projection"]),
    )
