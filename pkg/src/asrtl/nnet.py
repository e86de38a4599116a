"""TDNN-LSTM frame classifier with per-layer learning-rate multipliers.

Activations are batched as (B, T, D): B chunks of T frames. TDNN layers
splice their input at fixed frame offsets, clamping at chunk edges; LSTM
layers (with a recurrent projection) run left to right.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax

from . import serial

KINDS = ("tdnn", "lstm", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    dim: int = 0              # output dim for tdnn/softmax
    offsets: tuple = (0,)     # tdnn splice offsets
    cell_dim: int = 0         # lstm
    proj_dim: int = 0         # lstm recurrent projection (= output dim)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError("unknown layer kind %r" % self.kind)
        offs = tuple(int(o) for o in self.offsets)
        object.__setattr__(self, "offsets", offs)
        if self.kind == "tdnn":
            if any(b <= a for a, b in zip(offs, offs[1:])) or not offs:
                raise ValueError("%s: splice offsets must be strictly increasing" % self.name)
        if self.output_dim < 1 or (self.kind == "lstm" and self.cell_dim < 1):
            raise ValueError("%s: dims must be >= 1" % self.name)

    @property
    def output_dim(self):
        return self.proj_dim if self.kind == "lstm" else self.dim


def tdnn(name, dim, offsets):
    return LayerSpec("tdnn", name, dim=dim, offsets=tuple(offsets))


def lstm(name, cell_dim, proj_dim=None):
    return LayerSpec("lstm", name, cell_dim=cell_dim, proj_dim=proj_dim or cell_dim)


def softmax(name, dim):
    return LayerSpec("softmax", name, dim=dim)


def tdnn_lstm_specs(num_pdfs, tdnn_dim=64, cell_dim=32):
    """tdnn1-3, lstm1, tdnn4-5, lstm2, tdnn6-7, lstm3, output."""
    return [
        tdnn("tdnn1", tdnn_dim, (-1, 0, 1)),
        tdnn("tdnn2", tdnn_dim, (-1, 0, 1)),
        tdnn("tdnn3", tdnn_dim, (-3, 0, 3)),
        lstm("lstm1", cell_dim),
        tdnn("tdnn4", tdnn_dim, (-3, 0, 3)),
        tdnn("tdnn5", tdnn_dim, (-3, 0, 3)),
        lstm("lstm2", cell_dim),
        tdnn("tdnn6", tdnn_dim, (-3, 0, 3)),
        tdnn("tdnn7", tdnn_dim, (-3, 0, 3)),
        lstm("lstm3", cell_dim),
        softmax("output", num_pdfs),
    ]


# ---- layers -------------------------------------------------------------------

def _splice_index(T, offsets):
    return np.clip(np.arange(T)[:, None] + np.asarray(offsets)[None, :], 0, T - 1)


def _unsplice(g, offsets, T):
    """Adjoint of splicing: g is (B, T, n_off, D) -> (B, T, D)."""
    out = np.zeros(g.shape[:2] + g.shape[3:])
    for j, o in enumerate(offsets):
        gj = g[:, :, j]
        if o == 0:
            out += gj
        elif o > 0:
            if o < T:
                out[:, o:] += gj[:, :T - o]
            out[:, T - 1] += gj[:, max(T - o, 0):].sum(axis=1)
        else:
            o = -o
            if o < T:
                out[:, :T - o] += gj[:, o:]
            out[:, 0] += gj[:, :min(o, T)].sum(axis=1)
    return out


class Layer:
    def __init__(self, spec, in_dim, params, lr_multiplier=1.0):
        self.spec = spec
        self.in_dim = in_dim
        self.params = params
        self.lr_multiplier = float(lr_multiplier)

    @property
    def name(self):
        return self.spec.name

    @property
    def kind(self):
        return self.spec.kind

    @property
    def output_dim(self):
        return self.spec.output_dim

    def copy(self):
        return Layer(self.spec, self.in_dim, {k: v.copy() for k, v in self.params.items()},
                     self.lr_multiplier)


def init_layer(spec, in_dim, rng):
    # variance-preserving: He scaling ahead of ReLUs, unit-variance gate
    # pre-activations for LSTMs, forget gates biased open
    def uni(shape, var):
        a = np.sqrt(3.0 * var)
        return rng.uniform(-a, a, size=shape)

    if spec.kind == "tdnn":
        fan = in_dim * len(spec.offsets)
        p = {"W": uni((spec.dim, fan), 2.0 / fan), "b": np.zeros(spec.dim)}
    elif spec.kind == "lstm":
        C, R = spec.cell_dim, spec.proj_dim
        fan = in_dim + R
        b = np.zeros(4 * C)
        b[C:2 * C] = 1.0
        p = {"Wx": uni((4 * C, in_dim), 1.0 / fan), "Wr": uni((4 * C, R), 1.0 / fan),
             "b": b, "P": uni((R, C), 1.0 / C)}
    else:
        p = {"W": uni((spec.dim, in_dim), 1.0 / in_dim), "b": np.zeros(spec.dim)}
    return Layer(spec, in_dim, p)


_RENORM_EPS = 1e-8


def _tdnn_forward(layer, x, keep):
    # splice, affine, ReLU, then rescale each frame to unit RMS
    T = x.shape[1]
    idx = _splice_index(T, layer.spec.offsets)
    xs = x[:, idx].reshape(x.shape[0], T, -1)
    z = xs @ layer.params["W"].T + layer.params["b"]
    r = np.maximum(z, 0.0)
    s = 1.0 / np.sqrt(np.mean(r * r, axis=-1, keepdims=True) + _RENORM_EPS)
    return r * s, ((xs, z, s) if keep else None)


def _tdnn_backward(layer, cache, dy, need_dx):
    xs, z, s = cache
    r = np.maximum(z, 0.0)
    dr = s * dy - (s ** 3) * r * np.mean(dy * r, axis=-1, keepdims=True)
    dz = dr * (z > 0)
    B, T, _ = dz.shape
    g = {"W": dz.reshape(-1, dz.shape[2]).T @ xs.reshape(-1, xs.shape[2]),
         "b": dz.sum(axis=(0, 1))}
    dx = None
    if need_dx:
        dxs = (dz @ layer.params["W"]).reshape(B, T, len(layer.spec.offsets), layer.in_dim)
        dx = _unsplice(dxs, layer.spec.offsets, T)
    return g, dx


def _lstm_forward(layer, x, keep):
    p = layer.params
    B, T, _ = x.shape
    C, R = layer.spec.cell_dim, layer.spec.proj_dim
    zx = x @ p["Wx"].T + p["b"]
    Wr_T, P_T = p["Wr"].T, p["P"].T
    r = np.zeros((B, R))
    c = np.zeros((B, C))
    out = np.empty((B, T, R))
    if keep:
        gates = np.empty((B, T, 4 * C))
        cs = np.empty((B, T + 1, C))
        cs[:, 0] = 0.0
        ms = np.empty((B, T, C))
    for t in range(T):
        z = zx[:, t] + r @ Wr_T
        i = expit(z[:, :C])
        f = expit(z[:, C:2 * C])
        o = expit(z[:, 2 * C:3 * C])
        g = np.tanh(z[:, 3 * C:])
        c = f * c + i * g
        m = o * np.tanh(c)
        r = m @ P_T
        out[:, t] = r
        if keep:
            gates[:, t, :C] = i
            gates[:, t, C:2 * C] = f
            gates[:, t, 2 * C:3 * C] = o
            gates[:, t, 3 * C:] = g
            cs[:, t + 1] = c
            ms[:, t] = m
    return out, ((x, gates, cs, ms, out) if keep else None)


def _lstm_backward(layer, cache, dy, need_dx):
    x, gates, cs, ms, out = cache
    p = layer.params
    B, T, _ = x.shape
    C, R = layer.spec.cell_dim, layer.spec.proj_dim
    dP = np.zeros_like(p["P"])
    dWr = np.zeros_like(p["Wr"])
    dz_all = np.empty((B, T, 4 * C))
    dr_next = np.zeros((B, R))
    dc_next = np.zeros((B, C))
    Wr, P = p["Wr"], p["P"]
    for t in range(T - 1, -1, -1):
        dr = dy[:, t] + dr_next
        m = ms[:, t]
        dP += dr.T @ m
        dm = dr @ P
        i = gates[:, t, :C]
        f = gates[:, t, C:2 * C]
        o = gates[:, t, 2 * C:3 * C]
        g = gates[:, t, 3 * C:]
        c = cs[:, t + 1]
        tc = np.tanh(c)
        do = dm * tc
        dc = dc_next + dm * o * (1.0 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :C] = dc * g * i * (1.0 - i)
        dz[:, C:2 * C] = dc * cs[:, t] * f * (1.0 - f)
        dz[:, 2 * C:3 * C] = do * o * (1.0 - o)
        dz[:, 3 * C:] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        if t > 0:
            dWr += dz.T @ out[:, t - 1]
            dr_next = dz @ Wr
    flat = dz_all.reshape(-1, 4 * C)
    g = {"Wx": flat.T @ x.reshape(-1, x.shape[2]), "Wr": dWr, "b": flat.sum(axis=0), "P": dP}
    dx = (dz_all @ p["Wx"]) if need_dx else None
    return g, dx


def _affine_forward(layer, x, keep):
    z = x @ layer.params["W"].T + layer.params["b"]
    return z, (x if keep else None)


def _affine_backward(layer, cache, dz, need_dx):
    x = cache
    g = {"W": dz.reshape(-1, dz.shape[2]).T @ x.reshape(-1, x.shape[2]), "b": dz.sum(axis=(0, 1))}
    dx = (dz @ layer.params["W"]) if need_dx else None
    return g, dx


_FORWARD = {"tdnn": _tdnn_forward, "lstm": _lstm_forward, "softmax": _affine_forward}
_BACKWARD = {"tdnn": _tdnn_backward, "lstm": _lstm_backward, "softmax": _affine_backward}


# ---- network --------------------------------------------------------------------

class Network:
    def __init__(self, layers, input_dim):
        self.layers = list(layers)
        self.input_dim = int(input_dim)
        self._check()

    def _check(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ValueError("the last layer must be the softmax output")
        if any(l.kind == "softmax" for l in self.layers[:-1]):
            raise ValueError("softmax output must be last")
        d = self.input_dim
        for l in self.layers:
            if l.in_dim != d:
                raise ValueError("%s expects input dim %d, upstream gives %d" % (l.name, l.in_dim, d))
            if l.lr_multiplier < 0:
                raise ValueError("lr multipliers must be nonnegative")
            d = l.output_dim

    @property
    def output_dim(self):
        return self.layers[-1].output_dim

    @property
    def specs(self):
        return [l.spec for l in self.layers]

    def copy(self):
        return Network([l.copy() for l in self.layers], self.input_dim)

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def set_lr_multiplier(self, names, value):
        for l in self.layers:
            if l.name in names:
                l.lr_multiplier = float(value)

    def num_params(self):
        return sum(v.size for l in self.layers for v in l.params.values())

    def save(self, path):
        manifest = [{"name": l.name, "kind": l.kind, "offsets": list(l.spec.offsets), "dim": l.spec.dim,
                     "cell_dim": l.spec.cell_dim, "proj_dim": l.spec.proj_dim, "in_dim": l.in_dim,
                     "lr_multiplier": l.lr_multiplier, "params": sorted(l.params)} for l in self.layers]
        arrays = [("%s.%s" % (l.name, k), l.params[k]) for l in self.layers for k in sorted(l.params)]
        serial.dump(path, "NET", 1, arrays, {"input_dim": self.input_dim, "layers": manifest})

    @classmethod
    def load(cls, path):
        a, meta = serial.load(path, "NET", 1)
        layers = []
        for m in meta["layers"]:
            spec = LayerSpec(m["kind"], m["name"], dim=m["dim"], offsets=tuple(m["offsets"]),
                             cell_dim=m["cell_dim"], proj_dim=m["proj_dim"])
            params = {k: a["%s.%s" % (m["name"], k)] for k in m["params"]}
            layers.append(Layer(spec, m["in_dim"], params, m["lr_multiplier"]))
        return cls(layers, meta["input_dim"])


def build_network(specs, input_dim, seed=0):
    rng = np.random.default_rng(seed)
    layers = []
    d = input_dim
    for s in specs:
        layers.append(init_layer(s, d, rng))
        d = s.output_dim
    return Network(layers, input_dim)


def _as_batch(x):
    x = x.values if hasattr(x, "values") else np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def _run(net, x, dropout_rate, rng, keep_from):
    """Forward pass; returns (log-posteriors, caches, dropout masks)."""
    caches = [None] * len(net.layers)
    masks = [None] * len(net.layers)
    h = x
    for i, l in enumerate(net.layers):
        h, cache = _FORWARD[l.kind](l, h, i >= keep_from)
        caches[i] = cache
        if l.kind != "softmax" and dropout_rate > 0:
            m = (rng.random(h.shape) >= dropout_rate) / (1.0 - dropout_rate)
            h = h * m
            masks[i] = m
    return log_softmax(h, axis=-1), caches, masks


def forward(net, x, train_mode=False, dropout_rate=0.0, rng=None):
    """Per-frame posteriors (rows sum to one)."""
    xb, single = _as_batch(x)
    if xb.shape[-1] != net.input_dim:
        raise ValueError("input dim %d != network input dim %d" % (xb.shape[-1], net.input_dim))
    rate = dropout_rate if train_mode else 0.0
    if rate > 0 and rng is None:
        rng = np.random.default_rng(0)
    logp, _, _ = _run(net, xb, rate, rng, len(net.layers))
    p = np.exp(logp)
    return p[0] if single else p


def log_posteriors(net, x):
    xb, single = _as_batch(x)
    logp, _, _ = _run(net, xb, 0.0, None, len(net.layers))
    return logp[0] if single else logp


def lowest_trainable(net):
    for i, l in enumerate(net.layers):
        if l.lr_multiplier > 0:
            return i
    return len(net.layers)


def _forward_backward(net, x, y, mask, dropout_rate=0.0, rng=None, stop=0):
    """Summed NLL over masked frames and its gradient for layers >= stop."""
    logp, caches, masks = _run(net, x, dropout_rate, rng, stop)
    B, T, K = logp.shape
    bi, ti = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    picked = logp[bi, ti, y]
    nll = -float(np.sum(picked * mask))
    d = np.exp(logp)
    d[bi, ti, y] -= 1.0
    d *= mask[:, :, None]
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, stop - 1, -1):
        l = net.layers[i]
        if masks[i] is not None:
            d = d * masks[i]
        grads[i], d = _BACKWARD[l.kind](l, caches[i], d, i > stop)
    return nll, grads, float(mask.sum())


def backward(net, x, targets, train_mode=False, dropout_rate=0.0, rng=None):
    """Gradients of the mean per-frame cross-entropy; one dict per layer."""
    xb, single = _as_batch(x)
    y = np.asarray(targets, dtype=np.int64)
    y = y[None] if single else y
    if y.shape != xb.shape[:2]:
        raise ValueError("need one target per frame")
    if np.any(y < 0) or np.any(y >= net.output_dim):
        raise ValueError("target index out of range [0, %d)" % net.output_dim)
    rate = dropout_rate if train_mode else 0.0
    nll, grads, n = _forward_backward(net, xb, y, np.ones(y.shape), rate, rng, 0)
    return [{k: v / n for k, v in g.items()} for g in grads]


def mean_cross_entropy(net, x, targets):
    xb, single = _as_batch(x)
    y = np.asarray(targets, dtype=np.int64)
    y = y[None] if single else y
    logp = log_posteriors(net, xb)
    return -float(np.mean(np.take_along_axis(logp, y[..., None], axis=-1)))


# ---- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 4
    lr_initial: float = 0.001
    lr_final: float = 0.0001
    minibatch: int = 128
    xent_regularization: float = 0.1  # stored only; the objective is plain cross-entropy
    frames_per_example: tuple = (150, 110, 90)
    dropout_peak: float = 0.3
    dropout_start: float = 0.5
    minibatches_per_iter: int = 1
    max_change: float = 0.75
    max_change_output: float = 1.5
    diagnostic_utts: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_final <= self.lr_initial:
            raise ValueError("need 0 < lr_final <= lr_initial")
        if self.epochs < 1 or self.minibatch < 1 or self.minibatches_per_iter < 1:
            raise ValueError("epochs, minibatch and minibatches_per_iter must be >= 1")
        self.frames_per_example = tuple(int(v) for v in self.frames_per_example)


def lr_schedule(cfg, progress):
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    return cfg.lr_initial * (cfg.lr_final / cfg.lr_initial) ** progress


def dropout_schedule(cfg, progress, output_layer=False):
    if output_layer:
        return 0.0
    return cfg.dropout_peak if progress >= cfg.dropout_start else 0.0


@dataclass
class IterRecord:
    iteration: int
    train_logprob: float
    valid_logprob: float
    wall_ms: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def add(self, rec):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iterations must increase")
        self.records.append(rec)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("iter,train_logprob,valid_logprob,wall_ms\n")
            for r in self.records:
                f.write("%d,%.6f,%.6f,%.3f\n" % (r.iteration, r.train_logprob, r.valid_logprob, r.wall_ms))

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path, encoding="utf-8") as f:
            next(f)
            for line in f:
                it, tr, va, ms = line.strip().split(",")
                log.add(IterRecord(int(it), float(tr), float(va), float(ms)))
        return log


def make_chunks(utts, length):
    """Split each (x, y) utterance into non-overlapping chunks of `length` frames.

    The tail chunk is padded by repeating the last frame; padded frames get
    mask 0. Returns arrays (X, Y, M) of shape (n, length, ...).
    """
    xs, ys, ms = [], [], []
    for x, y in utts:
        T = len(x)
        for s in range(0, T, length):
            idx = np.minimum(np.arange(s, s + length), T - 1)
            xs.append(x[idx])
            ys.append(y[idx])
            ms.append((np.arange(s, s + length) < T).astype(np.float64))
    if not xs:
        return None
    return np.stack(xs), np.stack(ys), np.stack(ms)


def _pad_batch(utts):
    T = max(len(x) for x, _ in utts)
    X = np.stack([np.concatenate([x, np.repeat(x[-1:], T - len(x), axis=0)]) for x, _ in utts])
    Y = np.stack([np.concatenate([y, np.repeat(y[-1:], T - len(y))]) for _, y in utts])
    M = np.stack([(np.arange(T) < len(x)).astype(np.float64) for x, _ in utts])
    return X, Y, M


def average_logprob(net, utts, batch=16):
    """Mean per-frame log-probability of the targets (eval mode)."""
    if not utts:
        return float("nan")
    total = 0.0
    frames = 0.0
    order = sorted(range(len(utts)), key=lambda i: len(utts[i][0]))
    for s in range(0, len(order), batch):
        X, Y, M = _pad_batch([utts[i] for i in order[s:s + batch]])
        logp = log_posteriors(net, X)
        total += float(np.sum(np.take_along_axis(logp, Y[..., None], axis=-1)[..., 0] * M))
        frames += float(M.sum())
    return total / frames


def _plan(train, cfg, rng):
    """Lazy minibatch plan: (total minibatch count, generator of (X, Y, M)).

    Chunks are materialized one epoch-third at a time so memory stays
    bounded by a third of the training set.
    """
    L = cfg.frames_per_example
    groups = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train))
        for length, part in zip(L, np.array_split(order, len(L))):
            n = sum(-(-len(train[i][0]) // length) for i in part)
            groups.append((length, part, rng.permutation(n)))
    total = sum(-(-len(perm) // cfg.minibatch) for _, _, perm in groups)

    def gen():
        for length, part, perm in groups:
            ch = make_chunks([train[i] for i in part], length)
            if ch is None:
                continue
            X, Y, M = ch
            for s in range(0, len(perm), cfg.minibatch):
                b = perm[s:s + cfg.minibatch]
                yield X[b], Y[b], M[b]

    return total, gen()


def _apply_update(layer, grads, lr, max_change):
    step = lr * layer.lr_multiplier
    if step == 0.0:
        return
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())) * step
    scale = 1.0 if norm <= max_change or max_change <= 0 else max_change / norm
    for k, g in grads.items():
        layer.params[k] -= (step * scale) * g


def sgd_step(net, X, Y, M, lr, dropout_rate=0.0, rng=None, max_change=0.0, max_change_output=0.0):
    """One minibatch SGD update; returns the summed frame NLL.

    The objective is each chunk's summed frame NLL averaged over the chunks
    in the minibatch, so lr is a per-example rate independent of batch size.
    """
    stop = lowest_trainable(net)
    if stop >= len(net.layers):
        return float("nan")
    nll, grads, _ = _forward_backward(net, X, Y, M, dropout_rate, rng, stop)
    lr = lr / len(X)
    for i in range(stop, len(net.layers)):
        l = net.layers[i]
        mc = max_change_output if l.kind == "softmax" else max_change
        _apply_update(l, grads[i], lr, mc)
    return nll


def train_sgd(net, train, valid, cfg, on_iteration=None):
    """Minibatch SGD over chunked examples.

    train/valid are lists of (features T x D, targets T). Layers whose
    multiplier is 0 are neither updated nor backpropagated through when
    they sit below every trainable layer.
    """
    if not train:
        raise ValueError("empty training set")
    train = [(np.asarray(x.values if hasattr(x, "values") else x, dtype=np.float64),
              np.asarray(y, dtype=np.int64)) for x, y in train]
    valid = [(np.asarray(x.values if hasattr(x, "values") else x, dtype=np.float64),
              np.asarray(y, dtype=np.int64)) for x, y in valid]
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)
    total, batches = _plan(train, cfg, rng)
    diag_idx = np.random.default_rng(cfg.seed + 2).permutation(len(train))[:cfg.diagnostic_utts]
    diag = [train[i] for i in sorted(diag_idx)]

    log = TrainLog()
    log.add(IterRecord(0, average_logprob(net, diag), average_logprob(net, valid), 0.0))
    it = 0
    for start in range(0, total, cfg.minibatches_per_iter):
        t0 = time.perf_counter()
        for j in range(start, min(start + cfg.minibatches_per_iter, total)):
            progress = j / total
            X, Y, M = next(batches)
            sgd_step(net, X, Y, M, lr_schedule(cfg, progress), dropout_schedule(cfg, progress),
                     drop_rng, cfg.max_change, cfg.max_change_output)
        wall = (time.perf_counter() - t0) * 1000.0
        it += 1
        log.add(IterRecord(it, average_logprob(net, diag), average_logprob(net, valid), wall))
        if on_iteration is not None:
            on_iteration(net, log.records[-1])
    return net, log
