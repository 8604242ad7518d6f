"""LSTM encoder-decoder for next-stop load bins, with backprop through time.

Shapes: F input width, H hidden size, D dense width, N past stops, 5 output
bins. The encoder reads N past stop vectors; the decoder runs one step on
the target stop's vector (load columns zeroed) seeded with the encoder state;
two dense layers map the decoder state to bin logits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from tlf.domain import STOP_BIN_MIDPOINTS, ConfigError, Scheme, bin_levels
from tlf.features import FeatureSchema, STOP_NUMERICAL

log = logging.getLogger(__name__)

N_BINS = 5
FORMAT = "tlf-seq2seq"
FORMAT_VERSION = 1
LOAD_SCALE = 35.0


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Seq2SeqConfig:
    hidden: int = 64
    dense: int = 0  # 0 -> same as hidden
    n_past: int = 5
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    patience: int = 5
    seed: int = 0
    max_train_samples: int = 30000
    max_val_samples: int = 5000

    def __post_init__(self):
        if self.hidden < 1 or self.n_past < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("hidden, n_past and batch_size must be positive; epochs >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")

    @property
    def dense_width(self) -> int:
        return self.dense or self.hidden


# --- parameters ------------------------------------------------------------

def param_shapes(f: int, h: int, d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [
        ("enc_wx", (f, 4 * h)), ("enc_wh", (h, 4 * h)), ("enc_b", (4 * h,)),
        ("dec_wx", (f, 4 * h)), ("dec_wh", (h, 4 * h)), ("dec_b", (4 * h,)),
        ("w1", (h, d)), ("b1", (d,)), ("w2", (d, N_BINS)), ("b2", (N_BINS,)),
    ]


class Seq2SeqParams:
    """All weights live in one flat float64 vector; attributes are views into it."""

    def __init__(self, f: int, h: int, d: int, flat: Optional[np.ndarray] = None):
        self.f, self.h, self.d = f, h, d
        self.shapes = param_shapes(f, h, d)
        size = sum(int(np.prod(s)) for _, s in self.shapes)
        self.flat = np.zeros(size) if flat is None else np.array(flat, dtype=np.float64)
        if self.flat.shape != (size,):
            raise ConfigError(f"parameter vector has {self.flat.size} values, expected {size}")
        self.views: Dict[str, np.ndarray] = {}
        pos = 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            self.views[name] = self.flat[pos:pos + n].reshape(shape)
            pos += n

    def __getattr__(self, name):
        views = self.__dict__.get("views")
        if views is not None and name in views:
            return views[name]
        raise AttributeError(name)

    @classmethod
    def init(cls, f: int, h: int, d: int, seed: int) -> "Seq2SeqParams":
        """uniform(-1/sqrt(H), 1/sqrt(H)) weights; forget-gate biases start at +1."""
        p = cls(f, h, d)
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(h)
        p.flat[:] = rng.uniform(-bound, bound, p.flat.size)
        for b in ("enc_b", "dec_b"):
            p.views[b][:] = 0.0
            p.views[b][h:2 * h] = 1.0
        p.views["b1"][:] = 0.0
        p.views["b2"][:] = 0.0
        return p

    def copy(self) -> "Seq2SeqParams":
        return Seq2SeqParams(self.f, self.h, self.d, self.flat.copy())

    @property
    def size(self) -> int:
        return self.flat.size


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_step(x, h, c, wx, wh, b):
    H = h.shape[1]
    z = x @ wx + h @ wh + b
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, g, o, tc)


def _lstm_step_back(dh, dc, cache, wh):
    x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1)
    return dz, dz @ wh.T, dc * f


def _check_inputs(p: Seq2SeqParams, enc: np.ndarray, dec: np.ndarray):
    if enc.ndim != 3 or dec.ndim != 2 or enc.shape[2] != p.f or dec.shape[1] != p.f \
            or enc.shape[0] != dec.shape[0]:
        raise ValueError(f"input shapes {enc.shape}/{dec.shape} do not match feature width {p.f}")


def forward(p: Seq2SeqParams, enc: np.ndarray, dec: np.ndarray, return_cache: bool = False):
    """Bin probabilities (B, 5) for encoder inputs (B, N, F) and decoder inputs (B, F)."""
    enc = np.asarray(enc, dtype=np.float64)
    dec = np.asarray(dec, dtype=np.float64)
    _check_inputs(p, enc, dec)
    B, N, _ = enc.shape
    h = np.zeros((B, p.h))
    c = np.zeros((B, p.h))
    caches = []
    for t in range(N):
        h, c, cache = _lstm_step(enc[:, t], h, c, p.enc_wx, p.enc_wh, p.enc_b)
        caches.append(cache)
    hd, _, dcache = _lstm_step(dec, h, c, p.dec_wx, p.dec_wh, p.dec_b)
    a1 = np.tanh(hd @ p.w1 + p.b1)
    logits = a1 @ p.w2 + p.b2
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    if return_cache:
        return probs, (caches, dcache, hd, a1)
    return probs


def loss_and_grad(p: Seq2SeqParams, enc, dec, y) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient as a flat vector aligned with ``p.flat``."""
    y = np.asarray(y, dtype=np.int64)
    probs, (caches, dcache, hd, a1) = forward(p, enc, dec, return_cache=True)
    B = len(y)
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(B), y], 1e-300))))
    grad = Seq2SeqParams(p.f, p.h, p.d)
    g = grad.views
    dl = probs.copy()
    dl[np.arange(B), y] -= 1.0
    dl /= B
    g["w2"][:] = a1.T @ dl
    g["b2"][:] = dl.sum(axis=0)
    dpre = (dl @ p.w2.T) * (1.0 - a1 * a1)
    g["w1"][:] = hd.T @ dpre
    g["b1"][:] = dpre.sum(axis=0)
    dhd = dpre @ p.w1.T
    dz, dh, dc = _lstm_step_back(dhd, np.zeros_like(dhd), dcache, p.dec_wh)
    g["dec_wx"][:] = dcache[0].T @ dz
    g["dec_wh"][:] = dcache[1].T @ dz
    g["dec_b"][:] = dz.sum(axis=0)
    for cache in reversed(caches):
        dz, dh, dc = _lstm_step_back(dh, dc, cache, p.enc_wh)
        g["enc_wx"][:] += cache[0].T @ dz
        g["enc_wh"][:] += cache[1].T @ dz
        g["enc_b"][:] += dz.sum(axis=0)
    return loss, grad.flat


def gradient_check(p: Seq2SeqParams, enc, dec, y, step: float = 1e-5, n_params: int = 100,
                   seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is |a - n| / max(|a|, |n|, floor) over ``n_params``
    randomly chosen parameters.
    """
    _, grad = loss_and_grad(p, enc, dec, y)
    idx = np.random.default_rng(seed).choice(p.size, size=min(n_params, p.size), replace=False)
    q = p.copy()
    worst = 0.0
    for k in idx:
        orig = q.flat[k]
        q.flat[k] = orig + step
        lp, _ = loss_and_grad(q, enc, dec, y)
        q.flat[k] = orig - step
        lm, _ = loss_and_grad(q, enc, dec, y)
        q.flat[k] = orig
        num = (lp - lm) / (2 * step)
        err = abs(grad[k] - num) / max(abs(grad[k]), abs(num), floor)
        worst = max(worst, err)
    return worst


# --- training --------------------------------------------------------------

@dataclass
class TrainResult:
    params: Seq2SeqParams
    curve: pd.DataFrame
    best_epoch: int
    stopped_early: bool


class Adam:
    def __init__(self, size: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        flat -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def evaluate_loss(p: Seq2SeqParams, enc, dec, y, batch: int = 1024) -> Tuple[float, float]:
    """(mean cross-entropy, accuracy)."""
    total, correct = 0.0, 0
    for s in range(0, len(y), batch):
        probs = forward(p, enc[s:s + batch], dec[s:s + batch])
        yy = y[s:s + batch]
        total += float(-np.log(np.maximum(probs[np.arange(len(yy)), yy], 1e-300)).sum())
        correct += int((probs.argmax(axis=1) == yy).sum())
    return total / len(y), correct / len(y)


def train(enc: np.ndarray, dec: np.ndarray, y: np.ndarray, config: Seq2SeqConfig = Seq2SeqConfig(),
          val: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None) -> TrainResult:
    """Mini-batch Adam on cross-entropy; early stop after ``patience`` epochs without
    validation improvement, returning the best-validation parameters."""
    enc = np.asarray(enc, dtype=np.float64)
    dec = np.asarray(dec, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise TrainingError("no training samples")
    rng = np.random.default_rng(config.seed)
    p = Seq2SeqParams.init(enc.shape[2], config.hidden, config.dense_width, int(rng.integers(2**31)))
    opt = Adam(p.size, config.learning_rate)
    rows = []
    best_loss, best_epoch, best_flat, waited = np.inf, 0, p.flat.copy(), 0
    stopped = False
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(y))
        batch_losses = []
        for s in range(0, len(y), config.batch_size):
            b = perm[s:s + config.batch_size]
            loss, grad = loss_and_grad(p, enc[b], dec[b], y[b])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {s // config.batch_size} "
                                    f"(loss={loss}); learning rate {config.learning_rate} may be too high")
            opt.step(p.flat, grad)
            batch_losses.append(loss * len(b))
        train_loss = float(np.sum(batch_losses) / len(y))
        row = {"epoch": epoch, "train_loss": train_loss}
        if val is not None and len(val[2]):
            vl, va = evaluate_loss(p, *val)
            row.update(val_loss=vl, val_accuracy=va)
            if vl < best_loss - 1e-12:
                best_loss, best_epoch, best_flat, waited = vl, epoch, p.flat.copy(), 0
            else:
                waited += 1
        else:
            best_epoch, best_flat = epoch, p.flat.copy()
        rows.append(row)
        log.info("seq2seq epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items()})
        if val is not None and waited >= config.patience:
            stopped = True
            break
    p.flat[:] = best_flat
    return TrainResult(p, pd.DataFrame(rows), best_epoch, stopped)


def predict_bins(p: Seq2SeqParams, enc, dec, batch: int = 2048) -> np.ndarray:
    out = np.empty(len(enc), dtype=np.int64)
    for s in range(0, len(enc), batch):
        out[s:s + batch] = forward(p, enc[s:s + batch], dec[s:s + batch]).argmax(axis=1)
    return out


# --- stop encoding ---------------------------------------------------------

STOP_ONE_HOT = ["is_holiday", "is_school_break", "zero_load_at_trip_end", "route_direction", "time_window"]
STOP_ORDINAL = ["month", "day", "hour", "day_of_week"]
LOAD_COLUMNS = ["load_scaled"] + [f"load_bin={k}" for k in range(N_BINS)]
OBSERVED_CONTEXT = ("actual_headway",)


def load_block(loads) -> np.ndarray:
    """Load-derived columns: scaled load and a one-hot of its stop bin."""
    loads = np.asarray(loads, dtype=float)
    out = np.zeros((len(loads), 1 + N_BINS))
    out[:, 0] = loads / LOAD_SCALE
    out[np.arange(len(loads)), 1 + bin_levels(np.round(loads).astype(np.int64), Scheme.STOP)] = 1.0
    return out


@dataclass
class StopEncoder:
    """Context schema (fitted on training rows) followed by the load block.

    Columns only known once the bus reaches a stop (its load and actual
    headway) are "observed"; they are zeroed for the stop being predicted.
    """

    schema: FeatureSchema

    @classmethod
    def fit(cls, rows: pd.DataFrame) -> "StopEncoder":
        return cls(FeatureSchema.fit(rows, STOP_NUMERICAL + ["stop_sequence"], STOP_ONE_HOT,
                                     STOP_ORDINAL, scale_ordinal=True))

    @property
    def columns(self) -> List[str]:
        return self.schema.columns + LOAD_COLUMNS

    @property
    def width(self) -> int:
        return len(self.columns)

    @property
    def n_context(self) -> int:
        return len(self.schema.columns)

    def encode(self, rows: pd.DataFrame, diagnostics: Optional[list] = None) -> np.ndarray:
        ctx = self.schema.encode(rows, diagnostics)
        return np.hstack([ctx, load_block(rows["summed_load"].to_numpy(float))])

    @property
    def observed(self) -> np.ndarray:
        ctx = [i for i, c in enumerate(self.schema.columns) if c in OBSERVED_CONTEXT]
        return np.r_[ctx, np.arange(self.n_context, self.width)].astype(np.int64)

    def mask_load(self, vectors: np.ndarray) -> np.ndarray:
        out = np.array(vectors, dtype=np.float64, copy=True)
        out[..., self.observed] = 0.0
        return out

    def with_load(self, vectors: np.ndarray, loads) -> np.ndarray:
        out = np.array(vectors, dtype=np.float64, copy=True)
        out[..., self.n_context:] = load_block(loads)
        return out

    def to_dict(self) -> dict:
        return self.schema.to_dict()

    @classmethod
    def from_dict(cls, d: dict) -> "StopEncoder":
        return cls(FeatureSchema.from_dict(d))


def sample_index(sorted_stops: pd.DataFrame, n_past: int, min_stops: int = 0) -> pd.DataFrame:
    """Eligible targets: rows with ``n_past`` earlier stops of the same trip instance.

    Returns a frame with the target row position (``target``) and its position
    within the trip (``pos``); past rows are ``target - n_past .. target - 1``.
    """
    key = sorted_stops["transit_date"].astype("int64").astype(str) + "|" + sorted_stops["trip_id"].astype(str)
    codes = pd.factorize(key)[0]
    starts = np.r_[True, codes[1:] != codes[:-1]]
    seg = np.cumsum(starts) - 1
    first = np.flatnonzero(starts)
    pos = np.arange(len(codes)) - first[seg]
    length = np.bincount(seg)[seg]
    ok = (pos >= n_past) & (length >= min_stops)
    return pd.DataFrame({"target": np.flatnonzero(ok), "pos": pos[ok], "trip_len": length[ok],
                         "seq": seg[ok]})


def build_arrays(encoded: Dict[int, np.ndarray], targets: np.ndarray, n_past: int,
                 encoder: StopEncoder, loads: np.ndarray):
    """(enc, dec, y) for target row positions given encoded rows keyed by position."""
    enc = np.stack([np.stack([encoded[t - n_past + j] for j in range(n_past)]) for t in targets]) \
        if len(targets) else np.zeros((0, n_past, encoder.width))
    dec = encoder.mask_load(np.stack([encoded[t] for t in targets])) if len(targets) \
        else np.zeros((0, encoder.width))
    y = bin_levels(loads[targets].astype(np.int64), Scheme.STOP)
    return enc, dec, y


def encode_rows(sorted_stops: pd.DataFrame, positions: np.ndarray, encoder: StopEncoder) -> Dict[int, np.ndarray]:
    positions = np.unique(positions)
    mat = encoder.encode(sorted_stops.iloc[positions])
    return {int(k): mat[i] for i, k in enumerate(positions)}


def gather(sorted_stops: pd.DataFrame, targets: np.ndarray, n_past: int, encoder: StopEncoder):
    """Encode only the rows needed for ``targets`` and assemble model inputs."""
    need = (np.asarray(targets)[:, None] - np.arange(n_past + 1)[None, :]).ravel()
    encoded = encode_rows(sorted_stops, need, encoder)
    return build_arrays(encoded, np.asarray(targets), n_past, encoder,
                        sorted_stops["summed_load"].to_numpy())


# --- horizon ---------------------------------------------------------------

def predict_horizon(p: Seq2SeqParams, encoder: StopEncoder, seed: np.ndarray, future: np.ndarray,
                    horizon: int) -> np.ndarray:
    """Autoregressive bins for ``horizon`` stops.

    ``seed`` is (B, N, F) observed stop vectors, ``future`` (B, >=horizon, F)
    planned context vectors of the following stops (observed columns ignored).
    Each predicted bin is fed back as the next input using the bin midpoint
    as a load proxy.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    seed = np.asarray(seed, dtype=np.float64)
    future = np.asarray(future, dtype=np.float64)
    if future.ndim != 3 or future.shape[1] < horizon:
        raise ValueError(f"need planned features for {horizon} future stops")
    planned = np.setdiff1d(np.arange(encoder.n_context), encoder.observed)
    ctx = future[:, :horizon, planned]
    missing = np.argwhere(np.isnan(ctx).any(axis=2))
    if len(missing):
        listed = ", ".join(f"sample {b} stop +{k + 1}" for b, k in missing[:10])
        raise ValueError(f"missing planned features for: {listed}")
    window = seed.copy()
    out = np.empty((len(seed), horizon), dtype=np.int64)
    mids = np.asarray(STOP_BIN_MIDPOINTS, dtype=float)
    for k in range(horizon):
        probs = forward(p, window, encoder.mask_load(future[:, k]))
        bins = probs.argmax(axis=1)
        out[:, k] = bins
        fed = encoder.with_load(encoder.mask_load(future[:, k]), mids[bins])
        window = np.concatenate([window[:, 1:], fed[:, None, :]], axis=1)
    return out


# --- persistence -----------------------------------------------------------

def save_model(path, p: Seq2SeqParams, config: Seq2SeqConfig, encoder: Optional[StopEncoder] = None,
               provenance: Optional[dict] = None) -> Path:
    """JSON header at ``path`` plus little-endian float64 weights at ``path`` + '.bin'."""
    from tlf.io import version_string, write_json

    path = Path(path)
    weights = path.with_name(path.name + ".bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    weights.write_bytes(np.ascontiguousarray(p.flat, dtype="<f8").tobytes())
    header = {
        "format": FORMAT, "format_version": FORMAT_VERSION, "version": version_string(),
        "f": p.f, "h": p.h, "d": p.d, "config": asdict(config),
        "shapes": [[n, list(s)] for n, s in p.shapes], "weights_file": weights.name,
        "encoder": encoder.to_dict() if encoder is not None else None,
    }
    return write_json(header, path, provenance)


def load_model(path) -> Tuple[Seq2SeqParams, Seq2SeqConfig, Optional[StopEncoder]]:
    path = Path(path)
    header = json.loads(path.read_text())
    if header.get("format") != FORMAT or "version" not in header:
        raise ValueError("not a tlf seq2seq model")
    flat = np.frombuffer((path.parent / header["weights_file"]).read_bytes(), dtype="<f8")
    p = Seq2SeqParams(header["f"], header["h"], header["d"], flat)
    enc = StopEncoder.from_dict(header["encoder"]) if header.get("encoder") else None
    return p, Seq2SeqConfig(**header["config"]), enc
