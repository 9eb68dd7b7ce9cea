"""Greedy block-wise unsupervised training: AdamW, cosine learning-rate
annealing, the block training loop, a supervised linear probe on frozen
features, KNN evaluation, and the experiment drivers (lemma verification,
linear-vs-nonlinear study, ablation grid, transfer)."""

import hashlib
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as datamod
from . import network as net
from .linalg import NumericsError
from .losses import sphere_loss, sphere_grad_linear, orth_grad_linear
from .oracle import cka, principal_projection, svd_alignment


class OptimizerError(RuntimeError):
    """Non-finite gradients reached the optimizer."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Decoupled-weight-decay Adam over a dict of named parameter arrays.

    Parameters are updated in place; moments are keyed by parameter name.
    """

    def __init__(self, params: dict, lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {k!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, g in grads.items():
            p = self.params[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Cosine annealing from base_lr to min_lr over total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    """Full experiment description; defaults are the desk-scale setup
    (channel widths 1/8 of the full-scale architecture)."""

    channels: tuple = (48, 96, 192)
    activation: str = "leaky_relu"
    lam: float = 0.8
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 128
    epochs: int = 12          # total, split equally across blocks
    seed: int = 0
    use_sphere: bool = True
    use_oja: bool = False
    use_orth: bool = True
    use_phi: bool = True
    phi_depth: int = 1
    d_proj: int = 256
    dataset: str = "synthetic"
    dtype: str = "float64"

    def __post_init__(self):
        if not (self.use_sphere or self.use_oja):
            raise NumericsError("at least one matching loss must be enabled")
        if self.batch_size < 2:
            raise NumericsError("batch_size must be >= 2")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def epochs_per_block(self):
        return max(self.epochs // len(self.channels), 1)


def param_checksum(params: dict) -> str:
    """Stable digest of a parameter dict, used for frozen-feature and
    locality assertions."""
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# block-wise training


def build_blocks(config: TrainConfig, in_channels: int, rng):
    blocks = []
    c_in = in_channels
    for i, c_out in enumerate(config.channels):
        use_skip = i == len(config.channels) - 1
        f = net.init_main_block(c_in, c_out, rng, activation=config.activation,
                                use_skip=use_skip, dtype=config.np_dtype)
        phi = None
        if config.use_phi:
            phi = net.init_aux_block(c_out, d_proj=config.d_proj, depth=config.phi_depth,
                                     rng=rng, activation=config.activation,
                                     dtype=config.np_dtype)
        blocks.append((f, phi))
        c_in = c_out
    return blocks


def _forward_through(blocks, x, upto: int, chunk: int = 256):
    # chunked so im2col buffers stay bounded on large inputs
    if len(x) > chunk:
        return np.concatenate([_forward_through(blocks, x[i : i + chunk], upto)
                               for i in range(0, len(x), chunk)])
    for f, phi in blocks[:upto]:
        x, _ = net._main_forward(f, x)
    return x


def train_greedy(config: TrainConfig, images: np.ndarray):
    """Train blocks strictly in sequence, each against its own local loss.

    `images` is a normalized float array (n, C, H, W).  Returns (blocks,
    records) where records holds one metrics dict per (block, epoch).
    """
    images = np.asarray(images, dtype=config.np_dtype)
    rng = np.random.default_rng(config.seed)
    blocks = build_blocks(config, images.shape[1], rng)
    records = []
    lam = config.lam if config.use_orth else 0.0
    for bi, (f, phi) in enumerate(blocks):
        feats = _forward_through(blocks, images, bi)
        params = net.block_params(f, phi)
        opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
        epochs = config.epochs_per_block
        n_batches = max(len(feats) // config.batch_size, 1)
        total_steps = epochs * n_batches
        step = 0
        batch_rng = np.random.default_rng(config.seed + 1000 * (bi + 1))
        for epoch in range(epochs):
            t0 = time.monotonic()
            sums = np.zeros(3)
            batches = datamod.batch_indices(len(feats), min(config.batch_size, len(feats)),
                                            batch_rng, drop_last=len(feats) > config.batch_size)
            for idx in batches:
                grads, bundle = net.block_backward(
                    f, phi, feats[idx], lam,
                    use_sphere=config.use_sphere, use_oja=config.use_oja)
                if not math.isfinite(bundle.total):
                    raise TrainingDivergedError(f"non-finite loss at block {bi}, step {step}")
                lr = cosine_lr(step, total_steps, config.lr)
                opt.step(grads, lr=lr)
                sums += (bundle.sphere, bundle.orth, bundle.total)
                step += 1
            nb = len(batches)
            records.append({
                "block": bi,
                "epoch": epoch,
                "sphere": sums[0] / nb,
                "orth": sums[1] / nb,
                "total": sums[2] / nb,
                "lr": cosine_lr(step, total_steps, config.lr),
                "wall_ms": (time.monotonic() - t0) * 1e3,
            })
    return blocks, records


def features(blocks, images, batch_size: int = 256) -> np.ndarray:
    """Flattened post-pool output of the final block."""
    outs = []
    for i in range(0, len(images), batch_size):
        outs.append(net.flatten(_forward_through(blocks, images[i : i + batch_size], len(blocks))))
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# supervised probe and KNN on frozen features


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_probe(train_feats, train_labels, test_feats, test_labels,
                epochs: int = 20, lr: float = 1e-3, weight_decay: float = 0.05,
                batch_size: int = 128, seed: int = 0):
    """Linear softmax probe on frozen features; returns (train_acc, test_acc)."""
    if len(train_feats) != len(train_labels):
        raise NumericsError("feature/label count mismatch")
    n_classes = int(max(train_labels.max(), test_labels.max())) + 1
    d = train_feats.shape[1]
    rng = np.random.default_rng(seed)
    mu = train_feats.mean(axis=0)
    sd = train_feats.std(axis=0) + 1e-8
    xtr = (train_feats - mu) / sd
    xte = (test_feats - mu) / sd
    params = {"w": (rng.standard_normal((d, n_classes)) * 0.01).astype(xtr.dtype),
              "b": np.zeros(n_classes, dtype=xtr.dtype)}
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    onehot = np.eye(n_classes)[train_labels]
    for epoch in range(epochs):
        for idx in datamod.batch_indices(len(xtr), min(batch_size, len(xtr)), rng, drop_last=False):
            xb = xtr[idx]
            p = _softmax(xb @ params["w"] + params["b"])
            g = (p - onehot[idx]) / len(idx)
            opt.step({"w": xb.T @ g, "b": g.sum(axis=0)})

    def acc(x, y):
        pred = (x @ params["w"] + params["b"]).argmax(axis=1)
        return float(np.mean(pred == y))

    return acc(xtr, train_labels), acc(xte, test_labels)


def knn_eval(train_feats, train_labels, test_feats, test_labels, k: int = 5) -> float:
    """Cosine-distance KNN with majority vote; ties break to the nearest
    neighbor among the tied classes."""
    if k < 1 or k > len(train_feats):
        raise NumericsError(f"k={k} out of range for {len(train_feats)} train samples")
    tr = train_feats / (np.linalg.norm(train_feats, axis=1, keepdims=True) + 1e-12)
    te = test_feats / (np.linalg.norm(test_feats, axis=1, keepdims=True) + 1e-12)
    sims = te @ tr.T
    nn = np.argsort(-sims, axis=1)[:, :k]
    correct = 0
    for i in range(len(te)):
        labs = train_labels[nn[i]]
        counts = np.bincount(labs)
        best = counts.max()
        tied = np.nonzero(counts == best)[0]
        if len(tied) == 1:
            pred = tied[0]
        else:
            pred = next(l for l in labs if l in tied)
        correct += pred == test_labels[i]
    return correct / len(te)


# ---------------------------------------------------------------------------
# linear block training (oracle verification path)


def train_linear_block(x: np.ndarray, m: int, steps: int = 30000, lr: float = 1e-2,
                       lam: float = 0.0, seed: int = 0):
    """Train a single dense linear map W against the raw structural loss
    (plus optional orthogonality term) with AdamW; full-batch.

    Returns (w, history) with one raw sphere-loss value per step.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[1]
    rng = np.random.default_rng(seed)
    params = {"w": rng.standard_normal((n, m)) * (1.0 / math.sqrt(n))}
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    history = []
    for step in range(steps):
        g = sphere_grad_linear(x, params["w"])
        if lam:
            g = g + lam * orth_grad_linear(x, params["w"])
        opt.step({"w": g}, lr=cosine_lr(step, steps, lr))
        history.append(sphere_loss(x @ params["w"], x, normalize=False))
    return params["w"], history


# ---------------------------------------------------------------------------
# linear-vs-nonlinear branch study


def _mlp_init(sizes, rng, act="tanh"):
    layers = []
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        w = rng.standard_normal((sizes[i], sizes[i + 1])) / math.sqrt(fan_in)
        layers.append({"w": w, "b": np.zeros(sizes[i + 1])})
    return layers, act


def _mlp_forward(layers, act, x):
    caches = []
    h = x
    for i, lay in enumerate(layers):
        pre = h @ lay["w"] + lay["b"]
        if i < len(layers) - 1:
            out, d = net.activation(act, pre)
        else:
            out, d = pre, np.ones_like(pre)
        caches.append((h, d))
        h = out
    return h, caches


def _mlp_backward(layers, caches, dz):
    grads = []
    g = dz
    for i in range(len(layers) - 1, -1, -1):
        h, d = caches[i]
        g = g * d
        grads.append({"w": h.T @ g, "b": g.sum(axis=0)})
        g = g @ layers[i]["w"].T
    return list(reversed(grads))


def run_linearity_study(b: int = 256, n: int = 64, m: int = 40, epochs: int = 30,
                        hidden: int = 128, lr: float = 3e-3, seed: int = 0,
                        align_k: int = 36):
    """Train a linear branch and a 3-layer nonlinear branch on the same
    input under the raw structural-matching loss; log CKA between their
    outputs per epoch and the final SVD-component alignment (computed in
    sample space, where the two branches are comparable).

    Returns (cka_curve, alignment_matrix).
    """
    spec = datamod.SyntheticSpec(b=b, n=n, spectrum=datamod.harmonic_spectrum(n), seed=seed)
    x = datamod.synth_gaussian(spec)
    rng = np.random.default_rng(seed + 1)

    lin = {"w": rng.standard_normal((n, m)) / math.sqrt(n)}
    lin_opt = AdamW(lin, lr=2e-2)
    nl_layers, act = _mlp_init([n, hidden, hidden, m], rng)
    nl_params = {f"{i}.{k}": v for i, lay in enumerate(nl_layers) for k, v in lay.items()}
    nl_opt = AdamW(nl_params, lr=lr)

    kx = x @ x.T
    cka_curve = []
    steps_per_epoch = 40
    for epoch in range(epochs + 1):
        z_lin = x @ lin["w"]
        z_nl, _ = _mlp_forward(nl_layers, act, x)
        cka_curve.append(cka(z_lin, z_nl))
        if epoch == epochs:
            break
        for it in range(steps_per_epoch):
            step = epoch * steps_per_epoch + it
            lin_opt.step({"w": sphere_grad_linear(x, lin["w"])},
                         lr=cosine_lr(step, epochs * steps_per_epoch, 2e-2))
            z, caches = _mlp_forward(nl_layers, act, x)
            dz = 4.0 * (z @ z.T - kx) @ z
            gs = _mlp_backward(nl_layers, caches, dz)
            nl_opt.step({f"{i}.{k}": v for i, g in enumerate(gs) for k, v in g.items()},
                        lr=cosine_lr(step, epochs * steps_per_epoch, lr))

    z_lin = x @ lin["w"]
    z_nl, _ = _mlp_forward(nl_layers, act, x)
    align = svd_alignment(z_lin.T, z_nl.T, k=min(align_k, m))
    return cka_curve, align


# ---------------------------------------------------------------------------
# ablation and transfer drivers

ABLATION_GRID = (
    {"use_oja": True, "use_sphere": False, "use_orth": False, "use_phi": False},
    {"use_oja": True, "use_sphere": False, "use_orth": False, "use_phi": True},
    {"use_oja": True, "use_sphere": False, "use_orth": True, "use_phi": True},
    {"use_oja": False, "use_sphere": True, "use_orth": False, "use_phi": False},
    {"use_oja": False, "use_sphere": True, "use_orth": False, "use_phi": True},
    {"use_oja": False, "use_sphere": True, "use_orth": True, "use_phi": True},
)


def combo_name(flags: dict) -> str:
    parts = [k[4:] for k in ("use_oja", "use_sphere", "use_orth", "use_phi") if flags.get(k)]
    return "+".join(parts) if parts else "none"


def evaluate_config(config: TrainConfig, train_images, train_labels, test_images, test_labels,
                    probe_epochs: int = 20):
    """Train blocks unsupervised, then probe on frozen features."""
    blocks, records = train_greedy(config, train_images)
    before = param_checksum({f"b{i}.{k}": v for i, (f, phi) in enumerate(blocks)
                             for k, v in net.block_params(f, phi).items()})
    ftr = features(blocks, np.asarray(train_images, dtype=config.np_dtype))
    fte = features(blocks, np.asarray(test_images, dtype=config.np_dtype))
    tr_acc, te_acc = train_probe(ftr, train_labels, fte, test_labels,
                                 epochs=probe_epochs, seed=config.seed)
    after = param_checksum({f"b{i}.{k}": v for i, (f, phi) in enumerate(blocks)
                            for k, v in net.block_params(f, phi).items()})
    assert before == after, "probe training mutated block parameters"
    return {"train_acc": tr_acc, "test_acc": te_acc, "blocks": blocks, "records": records}


def run_ablation(base: TrainConfig, train_images, train_labels, test_images, test_labels,
                 grid=ABLATION_GRID):
    """One desk-scale accuracy per loss/architecture combination."""
    rows = []
    for flags in grid:
        if flags["use_orth"] and not flags["use_phi"]:
            rows.append({"combo": combo_name(flags), "test_acc": None,
                         "note": "memory constraint: orth without phi refused"})
            continue
        cfg = replace(base, **flags)
        res = evaluate_config(cfg, train_images, train_labels, test_images, test_labels)
        rows.append({"combo": combo_name(flags), "test_acc": res["test_acc"], "note": ""})
    return rows


def run_transfer(source_images, source_labels, target_train_images, target_train_labels,
                 target_test_images, target_test_labels, config: TrainConfig):
    """Blocks trained on the source set, probe on the target; reports the
    gap against training the blocks directly on the target."""
    blocks, _ = train_greedy(config, source_images)
    ftr = features(blocks, np.asarray(target_train_images, dtype=config.np_dtype))
    fte = features(blocks, np.asarray(target_test_images, dtype=config.np_dtype))
    _, transfer_acc = train_probe(ftr, target_train_labels, fte, target_test_labels,
                                  seed=config.seed)
    direct = evaluate_config(config, target_train_images, target_train_labels,
                             target_test_images, target_test_labels)
    return {"transfer_acc": transfer_acc, "direct_acc": direct["test_acc"],
            "gap": transfer_acc - direct["test_acc"]}
