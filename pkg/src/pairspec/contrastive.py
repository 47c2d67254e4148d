"""Parameterized contrastive kernels and their training losses.

A model is an MLP encoder composed with a kernel head. Heads give the
kernel its algebraic form: a plain inner product (optionally norm
constrained), an exponential of a cosine similarity with a temperature and
bias, or a rational-quadratic bump with per-example scales. Three losses
are provided, each in a sampled minibatch form and an exact population form
on enumerated tasks; all three are minimized (population version, over
unconstrained kernels) by the positive-pair density ratio, so a trained
kernel can be compared entry-by-entry against the exact one.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import numkit, pospair, tasklab
from .errors import KernelDomainError, ShapeError, TrainingError

CHECKPOINT_MAGIC = b"PSPECK1\n"


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


class Mlp:
    """Fully connected encoder with tanh hidden layers and a linear output."""

    def __init__(self, sizes, rng):
        if len(sizes) < 2:
            raise ShapeError("Mlp: need at least input and output sizes")
        self.sizes = list(int(s) for s in sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes, self.sizes[1:]):
            w = rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in)
            # Small nonzero bias init: an all-zero input row must not produce
            # an exactly-zero embedding (normalizing heads would lose it).
            b = 0.05 * rng.normal(size=(1, fan_out))
            self.weights.append(ad.parameter(w))
            self.biases.append(ad.parameter(b))

    def forward(self, x):
        h = x if isinstance(x, ad.Tensor) else ad.constant(np.atleast_2d(x))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = ad.tanh(h)
        return h

    def params(self):
        return list(self.weights) + list(self.biases)


# ---------------------------------------------------------------------------
# Kernel heads
# ---------------------------------------------------------------------------


def _rowwise_dot(a, b):
    return ad.tsum(a * b, axis=1)


class LinearHead:
    """K(a1, a2) = h(a1) . h(a2), optionally with ||h||^2 fixed to `norm`."""

    kind = "linear"

    def __init__(self, dim, norm=None):
        self.dim = int(dim)
        self.norm = None if norm is None else float(norm)
        if self.norm is not None and self.norm <= 0:
            raise ShapeError("LinearHead: norm constraint must be positive")

    def encoder_out_dim(self):
        return self.dim

    def embed(self, raw):
        if self.norm is None:
            return raw
        return ad.l2_normalize(raw) * np.sqrt(self.norm)

    def params(self):
        return []

    def cross(self, e1, e2):
        return e1 @ ad.transpose(e2)

    def pairwise(self, e1, e2):
        return _rowwise_dot(e1, e2)

    def log_cross(self, e1, e2):
        return self._log(self.cross(e1, e2))

    def log_pairwise(self, e1, e2):
        return self._log(self.pairwise(e1, e2))

    @staticmethod
    def _log(k):
        if np.any(k.value <= 0.0):
            raise KernelDomainError(
                "linear head produced a nonpositive kernel value under a log loss"
            )
        return ad.log(k)

    def config(self):
        return {"kind": self.kind, "dim": self.dim, "norm": self.norm}


class HypersphereHead:
    """K = exp(u1 . u2 / tau + bias) with unit-normalized embeddings.

    Bias modes: "global" learns one scalar b, "local" adds bounded
    per-example offsets s(a1) + s(a2) with s = 5 tanh(extra channel),
    "zero" fixes the bias at 0.
    """

    kind = "hypersphere"

    def __init__(self, dim, bias="global", init_temp=0.5, learn_temp=True):
        if bias not in ("global", "local", "zero"):
            raise ShapeError(f"HypersphereHead: unknown bias mode {bias!r}")
        if init_temp <= 0:
            raise ShapeError("HypersphereHead: temperature must be positive")
        self.dim = int(dim)
        self.bias_mode = bias
        self.learn_temp = bool(learn_temp)
        self.log_tau = ad.parameter(np.array(np.log(init_temp)))
        self.log_tau.requires_grad = self.learn_temp
        self.bias = ad.parameter(np.array(0.0)) if bias == "global" else None

    def encoder_out_dim(self):
        return self.dim + (1 if self.bias_mode == "local" else 0)

    def params(self):
        out = []
        if self.learn_temp:
            out.append(self.log_tau)
        if self.bias is not None:
            out.append(self.bias)
        return out

    def embed(self, raw):
        u = ad.l2_normalize(ad.narrow_cols(raw, 0, self.dim))
        if self.bias_mode == "local":
            s = ad.tanh(ad.narrow_cols(raw, self.dim, self.dim + 1)) * 5.0
            return (u, s)
        return (u, None)

    def _bias_matrix(self, s1, s2):
        if self.bias_mode == "global":
            return self.bias
        if self.bias_mode == "local":
            return s1 + ad.transpose(s2)
        return None

    def log_cross(self, e1, e2):
        (u1, s1), (u2, s2) = e1, e2
        out = (u1 @ ad.transpose(u2)) / ad.exp(self.log_tau)
        bias = self._bias_matrix(s1, s2)
        return out if bias is None else out + bias

    def log_pairwise(self, e1, e2):
        (u1, s1), (u2, s2) = e1, e2
        out = _rowwise_dot(u1, u2) / ad.exp(self.log_tau)
        if self.bias_mode == "global":
            out = out + self.bias
        elif self.bias_mode == "local":
            out = out + ad.tsum(s1, axis=1) + ad.tsum(s2, axis=1)
        return out

    def cross(self, e1, e2):
        return ad.exp(self.log_cross(e1, e2))

    def pairwise(self, e1, e2):
        return ad.exp(self.log_pairwise(e1, e2))

    def bias_penalty(self):
        if self.bias_mode == "global":
            return ad.square(self.bias)
        return None

    def config(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "bias": self.bias_mode,
            "init_temp": float(np.exp(self.log_tau.value)),
            "learn_temp": self.learn_temp,
        }


class RationalQuadraticHead:
    """K = s(a1) s(a2) (1 + ||v1 - v2||^2 / (2 alpha))^(-alpha).

    The head embeds each view as a low-dimensional position v plus a
    per-example log-scale channel bounded to [-5, 5]; alpha is learned.
    """

    kind = "rational_quadratic"

    def __init__(self, dim=2, init_alpha=1.0):
        if init_alpha <= 0:
            raise ShapeError("RationalQuadraticHead: alpha must be positive")
        self.dim = int(dim)
        self.log_alpha = ad.parameter(np.array(np.log(init_alpha)))

    def encoder_out_dim(self):
        return self.dim + 1

    def params(self):
        return [self.log_alpha]

    def embed(self, raw):
        v = ad.narrow_cols(raw, 0, self.dim)
        log_s = ad.tanh(ad.narrow_cols(raw, self.dim, self.dim + 1)) * 5.0
        return (v, log_s)

    def _log_bump_cross(self, v1, v2):
        alpha = ad.exp(self.log_alpha)
        sq1 = ad.tsum(ad.square(v1), axis=1, keepdims=True)
        sq2 = ad.tsum(ad.square(v2), axis=1, keepdims=True)
        sqdist = sq1 + ad.transpose(sq2) - (v1 @ ad.transpose(v2)) * 2.0
        return ad.log(sqdist / (alpha * 2.0) + 1.0) * (-1.0) * alpha

    def log_cross(self, e1, e2):
        (v1, s1), (v2, s2) = e1, e2
        return s1 + ad.transpose(s2) + self._log_bump_cross(v1, v2)

    def log_pairwise(self, e1, e2):
        (v1, s1), (v2, s2) = e1, e2
        alpha = ad.exp(self.log_alpha)
        sqdist = ad.tsum(ad.square(v1 - v2), axis=1)
        bump = ad.log(sqdist / (alpha * 2.0) + 1.0) * (-1.0) * alpha
        return ad.tsum(s1, axis=1) + ad.tsum(s2, axis=1) + bump

    def cross(self, e1, e2):
        return ad.exp(self.log_cross(e1, e2))

    def pairwise(self, e1, e2):
        return ad.exp(self.log_pairwise(e1, e2))

    def config(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "init_alpha": float(np.exp(self.log_alpha.value)),
        }


HEAD_KINDS = {
    "linear": LinearHead,
    "hypersphere": HypersphereHead,
    "rational_quadratic": RationalQuadraticHead,
}


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class ParamKernel:
    """Encoder + head pair; the trainable kernel."""

    encoder: Mlp
    head: object

    def params(self):
        return self.encoder.params() + self.head.params()

    def embed(self, features):
        return self.head.embed(self.encoder.forward(features))

    def kernel_matrix(self, features):
        """Dense kernel on the given feature rows (no gradients kept)."""
        e = self.embed(features)
        return self.head.cross(e, e).value.copy()

    def embedding_matrix(self, features):
        """Raw embedding rows h(a) (linear head) for spectral analysis."""
        e = self.embed(features)
        if isinstance(e, tuple):
            raise ShapeError("embedding_matrix: head has no flat embedding")
        return e.value.copy()


def build_model(feature_dim, hidden, head, rng):
    """Assemble a ParamKernel with a fresh encoder sized for the head."""
    sizes = [int(feature_dim)] + list(hidden) + [head.encoder_out_dim()]
    return ParamKernel(encoder=Mlp(sizes, rng), head=head)


def head_from_config(cfg):
    kind = cfg["kind"]
    if kind not in HEAD_KINDS:
        raise ShapeError(f"head_from_config: unknown head kind {kind!r}")
    kwargs = {k: v for k, v in cfg.items() if k != "kind"}
    return HEAD_KINDS[kind](**kwargs)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    """Weighted mixture of the three contrastive losses.

    negatives counts the fresh marginal samples per step for the
    classification loss; population switches every active loss to its exact
    full-population form (enumerated tasks only); bias_reg adds a quadratic
    penalty on a global kernel bias.
    """

    xent: float = 0.0
    logistic: float = 0.0
    spectral: float = 0.0
    negatives: int = 8
    population: bool = False
    bias_reg: float = 0.0

    def active(self):
        return [
            name
            for name, w in (
                ("xent", self.xent),
                ("logistic", self.logistic),
                ("spectral", self.spectral),
            )
            if w > 0.0
        ]

    def validate(self, batch=None):
        if self.xent < 0 or self.logistic < 0 or self.spectral < 0:
            raise ShapeError("LossSpec: weights must be nonnegative")
        if not self.active():
            raise ShapeError("LossSpec: at least one loss weight must be positive")
        if self.xent > 0 and not self.population:
            if self.negatives < 1:
                raise ShapeError("LossSpec: xent needs at least one negative")
            if batch is not None and batch < 2:
                raise ShapeError("LossSpec: xent needs batch >= 2")


def _support_mask(joint):
    return joint > 0.0


def pop_xent_from_log(log_gram, joint, p_a):
    """Population classification loss of a kernel given by its log-Gram.

    - sum_{a1,a2} joint(a1,a2) log [ p(a2) K(a1,a2) / sum_{a2'} p(a2') K(a1,a2') ].
    Invariant to a global rescaling of the kernel.
    """
    with np.errstate(divide="ignore"):
        log_p = np.log(p_a)
    scores = log_gram + log_p[None, :]
    lse = ad.logsumexp(scores, axis=1, keepdims=True)
    loglik = scores - lse
    picked = ad.where_const(_support_mask(joint), loglik, 0.0)
    return -ad.tsum(picked * joint)


def pop_logistic_from_log(log_gram, joint, p_a):
    """Population pair-classification logistic loss from the log-Gram.

    E_pos[-log sigma(log K)] + E_neg[-log sigma(-log K)] with negatives
    drawn from the product of marginals.
    """
    pos = ad.where_const(_support_mask(joint), ad.softplus(-log_gram), 0.0)
    neg = ad.softplus(log_gram)
    return ad.tsum(pos * joint) + ad.tsum(neg * np.outer(p_a, p_a))


def pop_spectral_from_gram(gram, joint, p_a):
    """Population spectral loss -2 E_pos[K] + E_neg[K^2] from the raw Gram."""
    return ad.tsum(gram * (-2.0 * joint)) + ad.tsum(ad.square(gram) * np.outer(p_a, p_a))


def _as_log_tensor(kernel_matrix):
    k = np.asarray(kernel_matrix, dtype=np.float64)
    if np.any(k < 0.0):
        raise KernelDomainError("log-domain loss on a negative kernel value")
    with np.errstate(divide="ignore"):
        return ad.constant(np.log(k))


def population_xent_value(kernel_matrix, joint, p_a):
    """Population classification loss of an explicit kernel matrix."""
    return float(pop_xent_from_log(_as_log_tensor(kernel_matrix), joint, p_a).value)


def population_logistic_value(kernel_matrix, joint, p_a):
    """Population logistic loss of an explicit kernel matrix."""
    return float(
        pop_logistic_from_log(_as_log_tensor(kernel_matrix), joint, p_a).value
    )


def population_spectral_value(kernel_matrix, joint, p_a):
    """Population spectral loss of an explicit kernel matrix."""
    k = ad.constant(np.asarray(kernel_matrix, dtype=np.float64))
    return float(pop_spectral_from_gram(k, joint, p_a).value)


def xent_sampled(head, anchors, positives, negatives):
    """NT classification loss for a batch, symmetrized over pair order.

    -log K(a1,a2) / (K(a1,a2) + sum_i K(a1, n_i)) averaged over the batch
    and over which side anchors the ranking; negatives are shared marginal
    samples.
    """

    def one_side(e_anchor, e_pos):
        lp = head.log_pairwise(e_anchor, e_pos)
        ln = head.log_cross(e_anchor, negatives)
        scores = ad.concat_cols([_col(lp), ln])
        lse = ad.logsumexp(scores, axis=1)
        return ad.tmean(lse - lp)

    return (one_side(anchors, positives) + one_side(positives, anchors)) * 0.5


def _col(vec):
    """Reshape a length-n tensor to an n x 1 column."""
    n = vec.value.shape[0]

    def backward_fn(grad):
        if vec.requires_grad:
            vec._accumulate(grad.reshape(n))

    return ad.Tensor(vec.value.reshape(n, 1), (vec,), backward_fn)


def logistic_sampled(head, pos1, pos2, neg1, neg2):
    """Pairwise logistic loss: positives scored up, marginal pairs down."""
    lp = head.log_pairwise(pos1, pos2)
    ln = head.log_pairwise(neg1, neg2)
    return ad.tmean(ad.softplus(-lp)) + ad.tmean(ad.softplus(ln))


def spectral_sampled(head, pos1, pos2, neg1, neg2):
    """Spectral loss: -2 E_pos[K] + E_neg[K^2] on sampled batches."""
    kp = head.pairwise(pos1, pos2)
    kn = head.pairwise(neg1, neg2)
    return ad.tmean(kp) * (-2.0) + ad.tmean(ad.square(kn))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch: int = 256
    lr: float = 3e-3
    seed: int = 0


@dataclass
class TrainResult:
    model: ParamKernel
    curve: list = field(default_factory=list)  # (step, total, {name: value})


def _sample_marginal_views(task, rng, count):
    if task.enumerated:
        p_a = tasklab.marginals(task)
        return list(rng.choice(task.views.count, size=count, p=p_a))
    return [tasklab.sample_view(task, rng) for _ in range(count)]


def _loss_terms_population(model, head, op, features_all, spec):
    e = model.embed(ad.constant(features_all))
    terms = {}
    if spec.spectral > 0:
        gram = head.cross(e, e)
        terms["spectral"] = pop_spectral_from_gram(gram, op.joint, op.p_a)
    if spec.xent > 0 or spec.logistic > 0:
        log_gram = head.log_cross(e, e)
        if spec.xent > 0:
            terms["xent"] = pop_xent_from_log(log_gram, op.joint, op.p_a)
        if spec.logistic > 0:
            terms["logistic"] = pop_logistic_from_log(log_gram, op.joint, op.p_a)
    return terms


def _loss_terms_sampled(model, head, task, spec, batch, rng):
    firsts, seconds = [], []
    for _ in range(batch):
        v1, v2, _ = tasklab.sample_pair(task, rng)
        firsts.append(v1)
        seconds.append(v2)
    e1 = model.embed(ad.constant(tasklab.view_features(task, firsts)))
    e2 = model.embed(ad.constant(tasklab.view_features(task, seconds)))
    terms = {}
    if spec.xent > 0:
        negs = _sample_marginal_views(task, rng, spec.negatives)
        en = model.embed(ad.constant(tasklab.view_features(task, negs)))
        terms["xent"] = xent_sampled(head, e1, e2, en)
    if spec.logistic > 0 or spec.spectral > 0:
        n1 = _sample_marginal_views(task, rng, batch)
        n2 = _sample_marginal_views(task, rng, batch)
        f1 = model.embed(ad.constant(tasklab.view_features(task, n1)))
        f2 = model.embed(ad.constant(tasklab.view_features(task, n2)))
        if spec.logistic > 0:
            terms["logistic"] = logistic_sampled(head, e1, e2, f1, f2)
        if spec.spectral > 0:
            terms["spectral"] = spectral_sampled(head, e1, e2, f1, f2)
    return terms


def train(task, model, spec, cfg):
    """Train a ParamKernel on a task.

    Adam with cosine learning-rate decay to zero; every step appends
    (step, total loss, per-loss values) to the returned curve. A non-finite
    loss aborts with the step index and current parameter norm.
    """
    spec.validate(batch=cfg.batch)
    if spec.population and not task.enumerated:
        raise ShapeError("train: population losses need an enumerated task")
    weights = {"xent": spec.xent, "logistic": spec.logistic, "spectral": spec.spectral}
    rng = numkit.rng_stream(cfg.seed, "train")
    params = model.params()
    opt = ad.Adam(params, lr=cfg.lr, total_steps=cfg.steps)
    curve = []
    op = None
    features_all = None
    if spec.population:
        op = pospair.build_exact(task)
        features_all = task.views.features
    for step in range(int(cfg.steps)):
        opt.zero_grad()
        if spec.population:
            terms = _loss_terms_population(model, model.head, op, features_all, spec)
        else:
            terms = _loss_terms_sampled(model, model.head, task, spec, cfg.batch, rng)
        total = None
        for name, term in terms.items():
            weighted = term * weights[name]
            total = weighted if total is None else total + weighted
        penalty = getattr(model.head, "bias_penalty", lambda: None)()
        if spec.bias_reg > 0 and penalty is not None:
            total = total + penalty * spec.bias_reg
        value = float(total.value)
        if not np.isfinite(value):
            norm = np.sqrt(sum(float((p.value**2).sum()) for p in params))
            raise TrainingError(
                f"train: non-finite loss at step {step}; parameter norm {norm:.3e}"
            )
        total.backward()
        opt.step()
        curve.append((step, value, {k: float(v.value) for k, v in terms.items()}))
    return TrainResult(model=model, curve=curve)


def grad_check(model, loss_fn, h=1e-4):
    """Compare reverse-mode gradients against central differences.

    loss_fn() must rebuild the loss from the model's current parameters.
    Returns the max over parameter entries of
    |g_ad - g_fd| / max(|g_fd|, 1e-6).
    """
    params = model.params()
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [
        np.zeros_like(p.value) if p.grad is None else np.array(p.grad, copy=True)
        for p in params
    ]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.value.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(loss_fn().value)
            flat[i] = keep - h
            down = float(loss_fn().value)
            flat[i] = keep
            fd = (up - down) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(abs(fd), 1e-6)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: JSON header + raw float64 parameter blob
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, feature_dim, meta=None):
    header = {
        "schema_version": 1,
        "feature_dim": int(feature_dim),
        "encoder_sizes": model.encoder.sizes,
        "head": model.head.config(),
        "param_shapes": [list(p.value.shape) for p in model.params()],
        "meta": meta or {},
    }
    blob = b"".join(
        np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in model.params()
    )
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(blob)
    return str(path)


def load_checkpoint(path):
    """Rebuild a ParamKernel from a checkpoint file."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ShapeError(f"load_checkpoint: {path} lacks the checkpoint magic")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    if header.get("schema_version") != 1:
        raise ShapeError("load_checkpoint: unsupported schema version")
    head = head_from_config(header["head"])
    sizes = header["encoder_sizes"]
    rng = numkit.rng_stream(0, "checkpoint-init")
    model = ParamKernel(encoder=Mlp(sizes, rng), head=head)
    params = model.params()
    shapes = [tuple(s) for s in header["param_shapes"]]
    if len(shapes) != len(params):
        raise ShapeError("load_checkpoint: parameter count mismatch")
    offset = 0
    for p, shape in zip(params, shapes):
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        p.value = data.reshape(shape).astype(np.float64)
    if offset != len(blob):
        raise ShapeError("load_checkpoint: parameter blob size mismatch")
    return model, header
