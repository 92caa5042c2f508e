"""ConvLSTM next-date predictor: cell, stacked model, trainer and checkpoints.

Gate equations (``*`` = same-padded convolution, ``o`` = per-channel peephole)::

    i = sigmoid(W_xi * X + W_hi * H_prev + w_ci o C_prev + b_i)
    f = sigmoid(W_xf * X + W_hf * H_prev + w_cf o C_prev + b_f)
    o = sigmoid(W_xo * X + W_ho * H_prev + w_co o C_prev + b_o)
    g = tanh(W_xc * X + W_hc * H_prev + b_c)
    C = f o C_prev + i o g
    H = o o tanh(C)

The output gate peeks at ``C_prev`` by default; ``output_peephole="new"``
switches it to the freshly computed ``C``.
"""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (Adam, NumericError, Parameter, RngStream, ShapeError, batch_norm,
                     batch_norm_backward, conv2d, conv2d_backward, conv_fans, cross_entropy_loss,
                     sigmoid, sigmoid_cross_entropy_backward, xavier_init)

log = logging.getLogger(__name__)

GATES = ("i", "f", "o", "c")
BN_EPS = 1e-5
CKPT_MAGIC = b"GCKP1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


# ----------------------------------------------------------------------------
# cell


@dataclass
class CellState:
    H: np.ndarray
    C: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype) -> "CellState":
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))


@dataclass
class CellCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


class ConvLstmCell:
    def __init__(self, in_channels: int, filters: int, kernel: int = 3, output_peephole: str = "prev",
                 rng: RngStream | None = None, dtype=np.float32, prefix: str = "cell"):
        if output_peephole not in ("prev", "new"):
            raise ValueError(f"output_peephole must be 'prev' or 'new', got {output_peephole!r}")
        self.in_channels, self.filters, self.kernel = in_channels, filters, kernel
        self.output_peephole = output_peephole
        rng = rng or RngStream(0)
        p = {}
        for gate in GATES:
            for src, cin in (("x", in_channels), ("h", filters)):
                shape = (filters, cin, kernel, kernel)
                p[f"W_{src}{gate}"] = xavier_init(shape, *conv_fans(shape), rng, dtype)
        for gate in ("i", "f", "o"):
            p[f"w_c{gate}"] = np.zeros(filters, dtype)
        for gate in GATES:
            p[f"b_{gate}"] = np.zeros(filters, dtype)
        self.params = {k: Parameter(f"{prefix}.{k}", v) for k, v in p.items()}

    def __getitem__(self, key) -> np.ndarray:
        return self.params[key].value

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _stacked(self, src: str) -> np.ndarray:
        return np.concatenate([self[f"W_{src}{g}"] for g in GATES], axis=0)

    def forward(self, x: np.ndarray, state: CellState) -> tuple[CellState, CellCache]:
        if x.shape[-3] != self.in_channels:
            raise ShapeError(f"input {x.shape} has {x.shape[-3]} channels, cell expects {self.in_channels}")
        if x.shape[:-3] + x.shape[-2:] != state.H.shape[:-3] + state.H.shape[-2:]:
            raise ShapeError(f"input {x.shape} does not match state {state.H.shape}")
        F = self.filters
        bias = np.concatenate([self[f"b_{g}"] for g in GATES])
        a = conv2d(x, self._stacked("x"), bias) + conv2d(state.H, self._stacked("h"))
        ai, af, ao, ag = (a[..., k * F:(k + 1) * F, :, :] for k in range(4))
        cp = state.C
        peep = {g: self[f"w_c{g}"][:, None, None] for g in ("i", "f", "o")}
        i = sigmoid(ai + peep["i"] * cp)
        f = sigmoid(af + peep["f"] * cp)
        g = np.tanh(ag)
        c = f * cp + i * g
        o = sigmoid(ao + peep["o"] * (cp if self.output_peephole == "prev" else c))
        tc = np.tanh(c)
        h = o * tc
        return CellState(h, c), CellCache(x, state.H, cp, i, f, o, g, c, tc)

    def backward(self, cache: CellCache, dh: np.ndarray, dc: np.ndarray):
        """Accumulate parameter grads; returns ``(dx, dh_prev, dc_prev)``."""
        if cache is None:
            raise ValueError("cell backward needs the cache saved by forward")
        i, f, o, g, cp = cache.i, cache.f, cache.o, cache.g, cache.c_prev
        red = tuple(range(dh.ndim - 3)) + (dh.ndim - 2, dh.ndim - 1)
        do = dh * cache.tanh_c
        dao = do * o * (1 - o)
        dc = dc + dh * o * (1 - cache.tanh_c ** 2)
        wco = self["w_co"][:, None, None]
        if self.output_peephole == "new":
            dc = dc + dao * wco
            self.params["w_co"].grad += (dao * cache.c).sum(axis=red)
        else:
            self.params["w_co"].grad += (dao * cp).sum(axis=red)
        dai = dc * g * i * (1 - i)
        daf = dc * cp * f * (1 - f)
        dag = dc * i * (1 - g * g)
        dc_prev = dc * f + dai * self["w_ci"][:, None, None] + daf * self["w_cf"][:, None, None]
        if self.output_peephole == "prev":
            dc_prev = dc_prev + dao * wco
        self.params["w_ci"].grad += (dai * cp).sum(axis=red)
        self.params["w_cf"].grad += (daf * cp).sum(axis=red)
        da = np.concatenate([dai, daf, dao, dag], axis=-3)
        dx, dwx, db = conv2d_backward(da, cache.x, self._stacked("x"))
        dh_prev, dwh, _ = conv2d_backward(da, cache.h_prev, self._stacked("h"))
        F = self.filters
        for k, gate in enumerate(GATES):
            self.params[f"W_x{gate}"].grad += dwx[k * F:(k + 1) * F]
            self.params[f"W_h{gate}"].grad += dwh[k * F:(k + 1) * F]
            self.params[f"b_{gate}"].grad += db[k * F:(k + 1) * F]
        return dx, dh_prev, dc_prev


# ----------------------------------------------------------------------------
# stacked model


@dataclass
class ModelConfig:
    in_channels: int = 1
    out_channels: int = 1
    n_layers: int = 4
    filters: int = 40
    kernel: int = 3
    output_peephole: str = "prev"
    bn_momentum: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        for name in ("in_channels", "out_channels", "n_layers", "filters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")


@dataclass
class BatchNormLayer:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray


class ConvLstmModel:
    """ConvLSTM stack with batch norm between layers and a sigmoid output conv.

    Batch norm follows every layer except the last, so the default 4-layer
    stack has 3 of them.
    """

    def __init__(self, cfg: ModelConfig | None = None, dtype=np.float32):
        self.cfg = cfg = cfg or ModelConfig()
        cfg.validate()
        rng = RngStream(cfg.seed)
        self.layers = []
        cin = cfg.in_channels
        for n in range(cfg.n_layers):
            self.layers.append(ConvLstmCell(cin, cfg.filters, cfg.kernel, cfg.output_peephole,
                                            rng.child(n), dtype, prefix=f"lstm{n}"))
            cin = cfg.filters
        self.norms = [
            BatchNormLayer(Parameter(f"bn{n}.gamma", np.ones(cfg.filters, dtype)),
                           Parameter(f"bn{n}.beta", np.zeros(cfg.filters, dtype)),
                           np.zeros(cfg.filters, dtype), np.ones(cfg.filters, dtype))
            for n in range(cfg.n_layers - 1)
        ]
        shape = (cfg.out_channels, cfg.filters, cfg.kernel, cfg.kernel)
        self.out_kernel = Parameter("out.kernel",
                                    xavier_init(shape, *conv_fans(shape), rng.child(1000), dtype))
        self.out_bias = Parameter("out.bias", np.zeros(cfg.out_channels, dtype))

    def parameters(self) -> list[Parameter]:
        out = []
        for n, cell in enumerate(self.layers):
            out += cell.parameters()
            if n < len(self.norms):
                out += [self.norms[n].gamma, self.norms[n].beta]
        return out + [self.out_kernel, self.out_bias]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for n, bn in enumerate(self.norms):
            out += [(f"bn{n}.running_mean", bn.running_mean), (f"bn{n}.running_var", bn.running_var)]
        return out

    @property
    def dtype(self):
        return self.out_kernel.value.dtype

    def astype(self, dtype) -> "ConvLstmModel":
        for p in self.parameters():
            p.astype(dtype)
        for bn in self.norms:
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, seq: np.ndarray, training: bool = False):
        """``seq`` is ``[T, Cin, H, W]`` or ``[N, T, Cin, H, W]``.

        Returns ``(prob, cache)`` where ``prob`` is ``[(N,) Cout, H, W]`` in (0, 1)
        computed from the last layer's final hidden state.
        """
        single = seq.ndim == 4
        x = seq[None] if single else seq
        if x.ndim != 5:
            raise ShapeError(f"sequence must be [T, C, H, W] or [N, T, C, H, W], got {seq.shape}")
        n, T, c, h, w = x.shape
        if T < 1:
            raise ShapeError("sequence length must be >= 1")
        if c != self.cfg.in_channels:
            raise ShapeError(f"input has {c} channels, model expects {self.cfg.in_channels}")
        x = x.astype(self.dtype, copy=False)
        caches = []
        for li, cell in enumerate(self.layers):
            state = CellState.zeros((n, cell.filters, h, w), self.dtype)
            steps, hs = [], []
            for t in range(T):
                state, cc = cell.forward(x[:, t], state)
                steps.append(cc)
                hs.append(state.H)
            out = np.stack(hs, axis=1)
            bn_cache = None
            if li < len(self.norms):
                bn = self.norms[li]
                if training:
                    out, bn_cache = batch_norm(out, bn.gamma.value, bn.beta.value, BN_EPS)
                    mom = self.cfg.bn_momentum
                    bn.running_mean[...] = mom * bn.running_mean + (1 - mom) * bn_cache.mean
                    bn.running_var[...] = mom * bn.running_var + (1 - mom) * bn_cache.var
                else:
                    out, _ = batch_norm(out, bn.gamma.value, bn.beta.value, BN_EPS,
                                        stats=(bn.running_mean, bn.running_var))
            caches.append((steps, bn_cache))
            x = out
        last = x[:, -1]
        logits = conv2d(last, self.out_kernel.value, self.out_bias.value)
        prob = sigmoid(logits)
        cache = (caches, last, T)
        return (prob[0] if single else prob), cache

    def backward(self, dlogits: np.ndarray, cache) -> None:
        """Backprop from d(loss)/d(logits); accumulates into ``Parameter.grad``.

        Only valid after a ``training=True`` forward.
        """
        caches, last, T = cache
        if dlogits.ndim == 3:
            dlogits = dlogits[None]
        dlast, dk, db = conv2d_backward(dlogits, last, self.out_kernel.value)
        self.out_kernel.grad += dk
        self.out_bias.grad += db
        dseq = np.zeros((last.shape[0], T) + last.shape[1:], dtype=last.dtype)
        dseq[:, -1] = dlast
        for li in reversed(range(len(self.layers))):
            steps, bn_cache = caches[li]
            if li < len(self.norms):
                if bn_cache is None:
                    raise ValueError("backward requires a forward pass with training=True")
                dseq, dg, dbeta = batch_norm_backward(dseq, bn_cache)
                self.norms[li].gamma.grad += dg
                self.norms[li].beta.grad += dbeta
            cell = self.layers[li]
            dh_next = np.zeros_like(dseq[:, 0])
            dc_next = np.zeros_like(dh_next)
            dx_seq = None
            for t in reversed(range(T)):
                dx, dh_next, dc_next = cell.backward(steps[t], dseq[:, t] + dh_next, dc_next)
                if dx_seq is None:
                    dx_seq = np.zeros((dx.shape[0], T) + dx.shape[1:], dtype=dx.dtype)
                dx_seq[:, t] = dx
            dseq = dx_seq


def model_forward(model: ConvLstmModel, sequence: np.ndarray) -> np.ndarray:
    """Inference-mode forward of one ``[T, Cin, H, W]`` sequence (or a batch)."""
    return model.forward(sequence, training=False)[0]


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 10
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_max: int = 32
    patience: int = 5
    threshold: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs_max < 1 or self.patience < 1:
            raise ValueError("batch_size, epochs_max and patience must be >= 1")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float | None = None
    val_accuracy: float | None = None


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def __len__(self):
        return len(self.epochs)

    def column(self, key: str) -> list:
        return [getattr(e, key) for e in self.epochs]


def as_sequences(tiles: np.ndarray) -> np.ndarray:
    """``[n, C, H, W]`` tiles -> ``[n, 1, C, H, W]`` single-step sequences."""
    tiles = np.asarray(tiles)
    if tiles.ndim == 3:
        tiles = tiles[:, None]
    return tiles[:, None] if tiles.ndim == 4 else tiles


def _target(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    return y[:, None] if y.ndim == 3 else y


def evaluate_loss(model: ConvLstmModel, X, Y, batch_size: int = 10, threshold: float = 0.5):
    """Inference-mode ``(mean cross-entropy, pixel accuracy)`` over a tile set."""
    X, Y = as_sequences(X), _target(Y)
    total, correct, count = 0.0, 0, 0
    for s in range(0, len(X), batch_size):
        prob, _ = model.forward(X[s:s + batch_size], training=False)
        y = Y[s:s + batch_size].astype(prob.dtype)
        total += cross_entropy_loss(prob, y) * prob.size
        correct += int(np.sum((prob > threshold) == (y >= 0.5)))
        count += prob.size
    return total / count, correct / count


def _snapshot(model: ConvLstmModel):
    return ([p.value.copy() for p in model.parameters()], [b.copy() for _, b in model.buffers()])


def _restore(model: ConvLstmModel, snap) -> None:
    values, buffers = snap
    for p, v in zip(model.parameters(), values):
        p.value[...] = v
    for (_, b), v in zip(model.buffers(), buffers):
        b[...] = v


def train_model(model: ConvLstmModel, train, cfg: TrainConfig, val=None,
                restore_best: bool = True) -> TrainLog:
    """Adam on per-pixel cross-entropy with seeded per-epoch shuffling.

    ``train``/``val`` are objects with ``X`` and ``Y`` tile arrays.  Stops at
    ``cfg.epochs_max`` or after ``cfg.patience`` epochs without a validation
    loss improvement; with ``restore_best`` the best-validation weights are
    kept.
    """
    cfg.validate()
    X, Y = as_sequences(train.X), _target(train.Y)
    n = len(X)
    if n == 0:
        raise ValueError("empty training set")
    if len(Y) != n:
        raise ValueError(f"|X| = {n} but |Y| = {len(Y)}")
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    if X.shape[-2:] != Y.shape[-2:]:
        raise ShapeError(f"input tiles {X.shape} and targets {Y.shape} differ spatially")
    rng = RngStream(cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    log_ = TrainLog()
    best, best_snap, waited = np.inf, None, 0
    for epoch in range(1, cfg.epochs_max + 1):
        order = rng.permutation(n)
        losses, correct, count = [], 0, 0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            x, y = X[idx], Y[idx].astype(model.dtype)
            model.zero_grad()
            prob, cache = model.forward(x, training=True)
            loss = cross_entropy_loss(prob, y)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.backward(sigmoid_cross_entropy_backward(prob, y), cache)
            opt.step()
            losses.append(loss * len(idx))
            correct += int(np.sum((prob > cfg.threshold) == (y >= 0.5)))
            count += prob.size
        entry = EpochLog(epoch, float(np.sum(losses) / n), correct / count)
        monitor = entry.train_loss
        if val is not None and len(val.X):
            entry.val_loss, entry.val_accuracy = evaluate_loss(model, val.X, val.Y, cfg.batch_size,
                                                               cfg.threshold)
            monitor = entry.val_loss
        log_.epochs.append(entry)
        log.info("epoch %d train %.4f val %s", epoch, entry.train_loss, entry.val_loss)
        if monitor < best:
            best, waited, log_.best_epoch = monitor, 0, epoch
            best_snap = _snapshot(model)
        else:
            waited += 1
            if waited >= cfg.patience:
                log_.stopped_early = True
                break
    if restore_best and best_snap is not None:
        _restore(model, best_snap)
    return log_


def predict(model: ConvLstmModel, tiles, threshold: float | None = None, batch_size: int = 10) -> np.ndarray:
    """Predicted next-date tiles ``[n, Cout, H, W]``; binarized if ``threshold`` is set."""
    X = as_sequences(tiles)
    if X.shape[2] != model.cfg.in_channels:
        raise ShapeError(f"tiles have {X.shape[2]} channels, model expects {model.cfg.in_channels}")
    out = [model.forward(X[s:s + batch_size], training=False)[0] for s in range(0, len(X), batch_size)]
    prob = np.concatenate(out) if out else np.zeros((0, model.cfg.out_channels) + X.shape[-2:])
    if threshold is None:
        return prob
    return (prob > threshold).astype(np.uint8)


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ConvLstmModel, path) -> None:
    """Write ``GCKP1``: magic, version, JSON config, tensor manifest, float32 blobs."""
    entries = [(p.name, p.value) for p in model.parameters()] + model.buffers()
    cfg = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(cfg)) + cfg
    out += struct.pack("<I", len(entries))
    for name, arr in entries:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    for _, arr in entries:
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> ConvLstmModel:
    buf = Path(path).read_bytes()
    if buf[:5] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a GCKP1 checkpoint")
    try:
        version, clen = struct.unpack_from("<II", buf, 5)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 13
        cfg = ModelConfig(**json.loads(buf[pos:pos + clen].decode()))
        pos += clen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        manifest = []
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + nl].decode()
            pos += 2 + nl
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            manifest.append((name, tuple(dims)))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    model = ConvLstmModel(cfg)
    targets = {p.name: p.value for p in model.parameters()}
    targets.update(dict(model.buffers()))
    if [name for name, _ in manifest] != [p.name for p in model.parameters()] + [n for n, _ in model.buffers()]:
        raise CheckpointError(f"{path}: tensor manifest does not match the model layout")
    for name, dims in manifest:
        size = int(np.prod(dims)) if dims else 1
        if pos + 4 * size > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name}")
        dst = targets[name]
        if dst.shape != dims:
            raise CheckpointError(f"{path}: {name} has shape {dims}, expected {dst.shape}")
        dst[...] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return model


def clone(model: ConvLstmModel) -> ConvLstmModel:
    return copy.deepcopy(model)
