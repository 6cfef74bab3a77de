"""Training: Adadelta updates, minibatched epochs with early stopping, checkpoints.

The objective is the mean per-sentence NLL over context windows (perplexity
evaluation divides by tokens instead; both conventions are explicit in the
code). Minibatches bucket windows by target length and mask the padding.
Everything is driven by one seeded generator, so a fixed seed in 64-bit mode
reproduces the whole trajectory bit for bit.
"""

import math
import struct
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import fusion
from . import numeric as nm
from .corpus import ContextWindow, Document, Vocabulary, corpus_windows, filter_by_length
from .numeric import Tape, Variable

CHECKPOINT_MAGIC = b"CTXLM1"
CHECKPOINT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class ConfigError(ValueError):
    pass


class NonFiniteGradient(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass
class TrainConfig:
    variant: str
    n: int
    d_h: int = 1000
    d_emb: int = 0          # 0 -> d_h
    d_ctx: int = 0          # 0 -> d_h
    vocab_size: int = 10000
    max_len: int = 50
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    seed: int = 1
    precision: str = "f64"
    rho: float = 0.95
    eps: float = 1e-6
    clip_norm: float = 5.0
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""

    def __post_init__(self):
        fusion.parse_variant(self.variant)
        if self.d_emb == 0:
            self.d_emb = self.d_h
        if self.d_ctx == 0:
            self.d_ctx = self.d_h
        if self.n < 0:
            raise ConfigError("n must be non-negative")
        for key in ("d_h", "d_emb", "d_ctx", "max_len", "batch_size", "max_epochs", "patience"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("rho must be in (0, 1)")
        if self.eps <= 0.0:
            raise ConfigError("eps must be positive")
        nm.dtype_of(self.precision)

    @property
    def d_a(self) -> int:
        # attention scorer width; the config schema has no key for it
        return self.d_ctx

    @property
    def dtype(self):
        return nm.dtype_of(self.precision)


CONFIG_KEYS = [f.name for f in fields(TrainConfig)]
_INT_KEYS = {"n", "d_h", "d_emb", "d_ctx", "vocab_size", "max_len", "batch_size",
             "max_epochs", "patience", "seed"}
_FLOAT_KEYS = {"rho", "eps", "clip_norm"}


def parse_config_text(text: str) -> dict[str, str]:
    """`key = value` lines; blank lines and #-comments are ignored."""
    out: dict[str, str] = {}
    for ln, line in enumerate(text.split("\n"), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {ln}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def config_from_mapping(raw: dict[str, str]) -> TrainConfig:
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    if "variant" not in raw:
        raise ConfigError("missing config key 'variant'")
    if "n" not in raw:
        raise ConfigError("missing config key 'n'")
    kwargs: dict = {}
    for key, value in raw.items():
        if key in _INT_KEYS:
            try:
                kwargs[key] = int(value)
            except ValueError:
                raise ConfigError(f"config key {key!r}: expected an integer, got {value!r}")
        elif key in _FLOAT_KEYS:
            try:
                kwargs[key] = float(value)
            except ValueError:
                raise ConfigError(f"config key {key!r}: expected a number, got {value!r}")
        else:
            kwargs[key] = value
    try:
        return TrainConfig(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e))


def format_config(config: TrainConfig, extras: dict[str, str] | None = None) -> str:
    lines = []
    for key in CONFIG_KEYS:
        value = getattr(config, key)
        if value == "" and key.endswith("_path"):
            continue
        lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    for key, value in (extras or {}).items():
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdadeltaState:
    """Running second moments of gradients and updates, one pair per parameter."""

    sq_grad: dict[str, np.ndarray]
    sq_delta: dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params: dict[str, Variable]) -> "AdadeltaState":
        return cls(
            {k: np.zeros_like(v.value) for k, v in params.items()},
            {k: np.zeros_like(v.value) for k, v in params.items()},
        )


def adadelta_update(param: np.ndarray, grad: np.ndarray, sq_grad: np.ndarray,
                    sq_delta: np.ndarray, rho: float, eps: float, name: str = "") -> None:
    """In-place Adadelta step: accumulate E[g^2], apply the scale-free delta,
    then accumulate E[delta^2]."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(name or "<anonymous>")
    sq_grad *= rho
    sq_grad += (1.0 - rho) * grad * grad
    delta = -(np.sqrt(sq_delta + eps) / np.sqrt(sq_grad + eps)) * grad
    sq_delta *= rho
    sq_delta += (1.0 - rho) * delta * delta
    param += delta


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.
    Non-positive max_norm disables clipping. Returns the pre-clip norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def gradient_batch(windows: list[ContextWindow], params: dict[str, Variable],
                   variant, vocab: Vocabulary) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-window NLL and its gradients w.r.t. every parameter."""
    tape = Tape()
    total, _ = fusion.batch_nll(windows, params, variant, vocab, tape)
    loss = nm.scale(tape, nm.sum_all(tape, total), 1.0 / len(windows))
    tape.backward(loss)
    grads = {name: p.grad_buffer().copy() for name, p in params.items()}
    for p in params.values():
        p.zero_grad()
    return float(loss.value), grads


def mean_window_nll(windows: list[ContextWindow], params: dict[str, Variable],
                    variant, vocab: Vocabulary, batch_size: int) -> float:
    total = 0.0
    for i in range(0, len(windows), batch_size):
        nll, _ = fusion.batch_nll(windows[i : i + batch_size], params, variant, vocab)
        total += float(nll.value.sum())
    return total / len(windows)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    arrays: dict[str, np.ndarray]  # model parameters, then optimizer state
    vocab_tokens: list[str]
    epoch: int
    best_valid_nll: float
    rng_state: str

    def model_params(self) -> dict[str, Variable]:
        return {
            name: Variable(arr, name)
            for name, arr in self.arrays.items()
            if not name.startswith("opt.")
        }

    def optimizer_state(self) -> AdadeltaState:
        eg = {n[len("opt.Eg."):]: a for n, a in self.arrays.items() if n.startswith("opt.Eg.")}
        ed = {n[len("opt.Ed."):]: a for n, a in self.arrays.items() if n.startswith("opt.Ed.")}
        return AdadeltaState(eg, ed)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.vocab_tokens)


def encode_rng_state(rng: np.random.Generator) -> str:
    s = rng.bit_generator.state
    return f"{s['bit_generator']}:{s['state']['state']}:{s['state']['inc']}:{s['has_uint32']}:{s['uinteger']}"


def decode_rng_state(text: str) -> np.random.Generator:
    kind, state, inc, has32, uint = text.split(":")
    if kind != "PCG64":
        raise ConfigError(f"unsupported generator {kind!r}")
    g = np.random.Generator(np.random.PCG64())
    g.bit_generator.state = {
        "bit_generator": kind,
        "state": {"state": int(state), "inc": int(inc)},
        "has_uint32": int(has32),
        "uinteger": int(uint),
    }
    return g


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(ckpt.arrays))
    for name, arr in ckpt.arrays.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        blob += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    extras = {
        "epoch": str(ckpt.epoch),
        "best_valid_nll": repr(ckpt.best_valid_nll),
        "rng_state": ckpt.rng_state,
        "vocab": " ".join(ckpt.vocab_tokens),
    }
    text = format_config(ckpt.config, extras).encode("utf-8")
    blob += struct.pack("<I", len(text)) + text
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        code, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        dtype = CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        arr = np.frombuffer(blob[off : off + nbytes], dtype=dtype.newbyteorder("<")).astype(dtype)
        arrays[name] = arr.reshape(dims)
        off += nbytes
    (text_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    text = blob[off : off + text_len].decode("utf-8")
    raw = parse_config_text(text)
    epoch = int(raw.pop("epoch"))
    best = float(raw.pop("best_valid_nll"))
    rng_state = raw.pop("rng_state")
    vocab_tokens = raw.pop("vocab").split(" ")
    config = config_from_mapping(raw)
    return Checkpoint(config, arrays, vocab_tokens, epoch, best, rng_state)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    valid_nll: float
    seconds: float

    def csv(self) -> str:
        return f"{self.epoch},{self.train_nll!r},{self.valid_nll!r},{self.seconds:.3f}"


def format_log(log: list[EpochRecord]) -> str:
    """Canonical training log (timing excluded: wall clock is not reproducible)."""
    return "".join(f"{r.epoch},{r.train_nll!r},{r.valid_nll!r}\n" for r in log)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochRecord] = field(default_factory=list)
    diverged: bool = False


class EarlyStopper:
    """Stop once the validation NLL has failed to improve for more than
    `patience` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale > self.patience


def _snapshot(config: TrainConfig, params: dict[str, Variable], opt: AdadeltaState,
              vocab: Vocabulary, epoch: int, best: float,
              rng: np.random.Generator) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {}
    for name, p in params.items():
        arrays[name] = p.value.copy()
    for name in params:
        arrays[f"opt.Eg.{name}"] = opt.sq_grad[name].copy()
        arrays[f"opt.Ed.{name}"] = opt.sq_delta[name].copy()
    return Checkpoint(config, arrays, list(vocab.tokens), epoch, best, encode_rng_state(rng))


def _length_bucketed_batches(windows: list[ContextWindow], rng: np.random.Generator,
                             batch_size: int) -> list[list[int]]:
    perm = rng.permutation(len(windows))
    by_len = sorted(perm, key=lambda i: len(windows[i].target.token_ids))
    batches = [by_len[i : i + batch_size] for i in range(0, len(by_len), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(config: TrainConfig, train_docs: list[Document], valid_docs: list[Document],
          vocab: Vocabulary, progress=None) -> TrainResult:
    """Fit the configured variant; returns the best checkpoint by validation NLL.

    On numeric divergence the last good checkpoint is returned with
    ``diverged`` set instead of raising.
    """
    variant = fusion.parse_variant(config.variant)
    dtype = config.dtype
    rng = np.random.Generator(np.random.PCG64(config.seed))
    params = fusion.init_parameters(
        variant, len(vocab), config.d_emb, config.d_h, config.d_ctx, config.d_a, rng, dtype
    )
    opt = AdadeltaState.for_params(params)

    train_windows = corpus_windows(filter_by_length(train_docs, config.max_len), config.n)
    valid_windows = corpus_windows(filter_by_length(valid_docs, config.max_len), config.n)
    if not train_windows:
        raise ValueError("no training windows after length filtering")
    if not valid_windows:
        raise ValueError("no validation windows after length filtering")

    stopper = EarlyStopper(config.patience)
    best = _snapshot(config, params, opt, vocab, 0, math.inf, rng)
    log: list[EpochRecord] = []
    for epoch in range(1, config.max_epochs + 1):
        started = time.monotonic()
        batches = _length_bucketed_batches(train_windows, rng, config.batch_size)
        loss_sum = 0.0
        seen = 0
        for idx_batch in batches:
            ws = [train_windows[i] for i in idx_batch]
            try:
                loss, grads = gradient_batch(ws, params, variant, vocab)
            except NonFiniteGradient:
                return TrainResult(best, log, diverged=True)
            if not math.isfinite(loss):
                return TrainResult(best, log, diverged=True)
            clip_gradients(grads, config.clip_norm)
            try:
                for name, p in params.items():
                    adadelta_update(p.value, grads[name], opt.sq_grad[name],
                                    opt.sq_delta[name], config.rho, config.eps, name)
            except NonFiniteGradient:
                return TrainResult(best, log, diverged=True)
            loss_sum += loss * len(ws)
            seen += len(ws)
        train_nll = loss_sum / seen
        valid_nll = mean_window_nll(valid_windows, params, variant, vocab, config.batch_size)
        record = EpochRecord(epoch, train_nll, valid_nll, time.monotonic() - started)
        log.append(record)
        if progress is not None:
            progress(record)
        if not math.isfinite(valid_nll):
            return TrainResult(best, log, diverged=True)
        if stopper.update(epoch, valid_nll):
            best = _snapshot(config, params, opt, vocab, epoch, valid_nll, rng)
        if stopper.should_stop:
            break
    return TrainResult(best, log, diverged=False)
