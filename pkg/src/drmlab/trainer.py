"""Alternating training loop for discriminant-risk minimization.

Each step runs two phases. Phase 1 holds the feature extractor fixed and
takes one SGD step on the variational head's ELBO. Phase 2 holds the head
fixed, draws fresh weight samples, slide-updates the Discriminant matrix
with the batch's per-class mean predictions, and takes one Adam step on
the extractor loss: cross-entropy of the averaged prediction plus alpha
times the CDR penalty.

Training consumes a view of the data that carries no domain ids; domain
information exists only on the evaluation side. All randomness comes from
counter-based streams keyed by (seed, step, phase, draw), so a run is a
pure function of its config.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bayes_classifier as bc
from .datagen import DomainDataset, load_dataset
from .discriminant import DiscriminantMatrix, cdr_penalty, group_by_class, init_matrix, slide_update
from .numcore import Var

PHASE_HEAD, PHASE_EXTRACTOR, PHASE_EVAL = 1, 2, 3
TAG_INIT_EXTRACTOR, TAG_INIT_HEAD, TAG_SPLIT, TAG_EPOCH = 901, 902, 903, 904


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the step index."""

    def __init__(self, step: int, what: str):
        super().__init__(f"training diverged at step {step}: {what}")
        self.step = step


@dataclass
class ExperimentConfig:
    """All hyperparameters of one run; defaults follow the reference setting."""

    alpha: float = 5.0
    beta: float = 0.95
    samples: int = 3
    batch_size: int = 32
    lr_extractor: float = 5e-5
    lr_head: float = 5e-5
    prior_variance: float = 10.0
    weight_decay: float = 1e-4
    steps: int = 4000
    seed: int = 0
    hidden_sizes: tuple = (16, 8)
    val_fraction: float = 0.2
    eval_every: int = 200
    checkpoint_every: int = 2000
    data_path: str | None = None
    out_dir: str | None = None
    erm_baseline: bool = False
    freeze_sigma: bool = False
    use_erm_term: bool = True
    use_cdr_term: bool = True

    def __post_init__(self):
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)

    def resolved(self) -> "ExperimentConfig":
        """Apply the ERM-baseline toggle: no penalty, deterministic head."""
        if self.erm_baseline:
            return replace(self, alpha=0.0, freeze_sigma=True)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainView:
    """Label-and-features view of a dataset; deliberately has no domain ids."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return self.x.shape[0]


def train_view(dataset: DomainDataset) -> TrainView:
    return TrainView(dataset.x, dataset.y, dataset.n_classes)


class FeatureExtractor:
    """Small tanh MLP; parameters live in plain float64 arrays."""

    def __init__(self, layer_sizes, rng: np.random.Generator):
        if len(layer_sizes) < 2:
            raise ValueError(f"need at least input and output sizes, got {layer_sizes}")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self.weights.append(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)))
            self.biases.append(np.zeros(n_out))

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w + b)
        return h

    def forward_tape(self, x: np.ndarray) -> tuple[Var, list[Var]]:
        """Differentiable forward; returns (features, parameter leaves)."""
        h = Var(np.asarray(x, dtype=np.float64))
        leaves = []
        for w, b in zip(self.weights, self.biases):
            wv, bv = Var(w), Var(b)
            leaves.extend([wv, bv])
            h = (h @ wv + bv).tanh()
        return h, leaves

    def params_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def set_params_vector(self, flat: np.ndarray) -> None:
        pos = 0
        for i in range(len(self.weights)):
            for arrs, idx in ((self.weights, i), (self.biases, i)):
                size = arrs[idx].size
                arrs[idx] = flat[pos : pos + size].reshape(arrs[idx].shape).copy()
                pos += size
        if pos != flat.size:
            raise ValueError(f"parameter vector has {flat.size} entries, extractor needs {pos}")


@dataclass
class TrainState:
    extractor: FeatureExtractor
    posterior: bc.GaussianPosterior
    matrix: DiscriminantMatrix
    step: int = 0
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.extractor.params_vector().size
        if self.adam_m is None:
            self.adam_m = np.zeros(n)
        if self.adam_v is None:
            self.adam_v = np.zeros(n)


@dataclass
class StepMetrics:
    step: int
    erm_loss: float
    cdr: float
    elbo: float
    total: float
    val_acc: float
    wall_ms: float


def noise_block(seed: int, step: int, phase: int, samples: int, size: int, frozen: bool) -> np.ndarray:
    """(samples, size) standard normals from per-draw counter-based streams."""
    if frozen:
        return np.zeros((samples, size))
    out = np.empty((samples, size))
    for t in range(samples):
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, step, phase, t))))
        out[t] = gen.standard_normal(size)
    return out


def init_state(config: ExperimentConfig, input_dim: int, n_classes: int) -> TrainState:
    config = config.resolved()
    rng_ext = np.random.default_rng(np.random.SeedSequence((config.seed, TAG_INIT_EXTRACTOR)))
    extractor = FeatureExtractor((input_dim, *config.hidden_sizes), rng_ext)
    rng_head = np.random.default_rng(np.random.SeedSequence((config.seed, TAG_INIT_HEAD)))
    posterior = bc.init_posterior(extractor.out_dim, n_classes, rng_head)
    matrix = init_matrix(n_classes, config.beta)
    return TrainState(extractor, posterior, matrix)


def _params_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _mean_prediction_graph(extractor, posterior, x, samples, noise):
    """Tape from extractor parameters to averaged softmax predictions."""
    z, leaves = extractor.forward_tape(x)
    d, c = posterior.n_features, posterior.n_classes
    acc = None
    for t in range(samples):
        flat = bc.sample_weights(posterior, noise[t]).values
        w, b = flat[: d * c].reshape(c, d), flat[d * c :]
        probs = (z @ w.T + b).softmax()
        acc = probs if acc is None else acc + probs
    return acc / float(samples), leaves


def erm_loss(extractor, posterior, x, y, samples: int, noise) -> tuple[float, np.ndarray]:
    """Cross-entropy of the T-averaged prediction, with extractor gradient."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty batch")
    mean_probs, leaves = _mean_prediction_graph(extractor, posterior, x, samples, noise)
    loss = -mean_probs.pick(y).clip_min(1e-12).log().mean()
    loss.backward()
    grad = np.concatenate([leaf.grad.ravel() for leaf in leaves])
    return float(loss.value), grad


def train_step(state: TrainState, batch_x, batch_y, config: ExperimentConfig, dataset_size: int) -> StepMetrics:
    """One alternating update; mutates state in place and returns metrics."""
    config = config.resolved()
    started = time.perf_counter()
    x = np.asarray(batch_x, dtype=np.float64)
    y = np.asarray(batch_y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty batch")
    post = state.posterior
    prior = bc.PriorSpec(config.prior_variance)

    # phase 1: extractor fixed, one SGD step on the head's ELBO
    extractor_hash = _params_hash(state.extractor.params_vector())
    z = state.extractor.forward(x)
    noise1 = noise_block(config.seed, state.step, PHASE_HEAD, config.samples, post.size, config.freeze_sigma)
    elbo, grad_mu, grad_rho = bc.elbo_loss(
        post, z, y, prior, config.samples, noise1, dataset_size, include_kl=not config.freeze_sigma
    )
    if not np.isfinite(elbo):
        raise TrainingDivergedError(state.step, "ELBO is non-finite")
    post.mu = post.mu - config.lr_head * grad_mu
    if not config.freeze_sigma:
        post.rho = post.rho - config.lr_head * grad_rho
    assert _params_hash(state.extractor.params_vector()) == extractor_hash, "phase 1 touched the extractor"

    # phase 2: head fixed, matrix update then one Adam step on the extractor
    head_hash = _params_hash(post.mu, post.rho)
    noise2 = noise_block(config.seed, state.step, PHASE_EXTRACTOR, config.samples, post.size, config.freeze_sigma)
    mean_probs, leaves = _mean_prediction_graph(state.extractor, post, x, config.samples, noise2)
    preds = group_by_class(mean_probs, y)
    state.matrix = slide_update(state.matrix, preds)

    erm_term = -mean_probs.pick(y).clip_min(1e-12).log().mean()
    erm_value = float(erm_term.value)
    use_cdr = config.use_cdr_term and config.alpha > 0.0
    if use_cdr:
        cdr_term = cdr_penalty(state.matrix, preds)
        cdr_value = float(cdr_term.value)
    else:
        # report the penalty even when it is not optimized
        cdr_value = float(cdr_penalty(state.matrix, preds).value)

    if config.use_erm_term and use_cdr:
        loss = erm_term + config.alpha * cdr_term
    elif config.use_erm_term:
        loss = erm_term
    elif use_cdr:
        loss = config.alpha * cdr_term
    else:
        raise ValueError("config disables both loss terms")
    total = float(loss.value)
    if not np.isfinite(total):
        raise TrainingDivergedError(state.step, "extractor loss is non-finite")

    loss.backward()
    grad = np.concatenate([leaf.grad.ravel() for leaf in leaves])
    theta = state.extractor.params_vector()
    grad = grad + config.weight_decay * theta

    t = state.step + 1
    state.adam_m = 0.9 * state.adam_m + 0.1 * grad
    state.adam_v = 0.999 * state.adam_v + 0.001 * grad**2
    m_hat = state.adam_m / (1.0 - 0.9**t)
    v_hat = state.adam_v / (1.0 - 0.999**t)
    theta = theta - config.lr_extractor * m_hat / (np.sqrt(v_hat) + 1e-8)
    state.extractor.set_params_vector(theta)
    assert _params_hash(post.mu, post.rho) == head_hash, "phase 2 touched the head"

    state.step += 1
    wall_ms = (time.perf_counter() - started) * 1000.0
    return StepMetrics(state.step - 1, erm_value, cdr_value, elbo, total, float("nan"), wall_ms)


def validation_accuracy(state: TrainState, x, y, config: ExperimentConfig) -> float:
    config = config.resolved()
    noise = noise_block(
        config.seed, state.step, PHASE_EVAL, config.samples, state.posterior.size, config.freeze_sigma
    )
    z = state.extractor.forward(x)
    probs = bc.predict_proba(state.posterior, z, config.samples, noise)
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))


METRICS_COLUMNS = ("step", "erm_loss", "cdr", "elbo", "val_acc")


def _write_metrics(history: list[StepMetrics], path: Path) -> None:
    # wall-clock goes to a sibling file so metrics.csv replays byte-identically
    lines = [",".join(METRICS_COLUMNS)]
    for m in history:
        lines.append(f"{m.step},{m.erm_loss!r},{m.cdr!r},{m.elbo!r},{m.val_acc!r}")
    path.write_text("\n".join(lines) + "\n")


def _write_timings(history: list[StepMetrics], path: Path) -> None:
    lines = ["step,wall_ms"] + [f"{m.step},{m.wall_ms:.3f}" for m in history]
    path.write_text("\n".join(lines) + "\n")


def train(config: ExperimentConfig, dataset: DomainDataset | None = None) -> tuple[TrainState, list[StepMetrics]]:
    """Run the full loop; writes artifacts under config.out_dir if set."""
    config = config.resolved()
    if dataset is None:
        if config.data_path is None:
            raise ValueError("config needs data_path when no dataset is passed")
        dataset = load_dataset(config.data_path)
    view = train_view(dataset)

    rng_split = np.random.default_rng(np.random.SeedSequence((config.seed, TAG_SPLIT)))
    perm = rng_split.permutation(len(view))
    n_val = max(1, int(round(config.val_fraction * len(view))))
    val_idx, fit_idx = perm[:n_val], perm[n_val:]
    if fit_idx.size == 0:
        raise ValueError("no training data left after validation split")

    state = init_state(config, view.x.shape[1], view.n_classes)
    out_dir = Path(config.out_dir) if config.out_dir else None
    ckpt_dir = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    history: list[StepMetrics] = []
    last_val = float("nan")
    best_val = -1.0
    order = np.empty(0, dtype=np.int64)
    cursor = 0
    epoch = 0
    for step in range(config.steps):
        if cursor + config.batch_size > order.size:
            rng_epoch = np.random.default_rng(np.random.SeedSequence((config.seed, TAG_EPOCH, epoch)))
            order = fit_idx[rng_epoch.permutation(fit_idx.size)]
            cursor = 0
            epoch += 1
        batch = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size

        metrics = train_step(state, view.x[batch], view.y[batch], config, dataset_size=fit_idx.size)
        if step % config.eval_every == 0 or step == config.steps - 1:
            last_val = validation_accuracy(state, view.x[val_idx], view.y[val_idx], config)
            if ckpt_dir and last_val > best_val:
                best_val = last_val
                save_checkpoint(state, ckpt_dir / "best.bin")
        metrics.val_acc = last_val
        history.append(metrics)
        if ckpt_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(state, ckpt_dir / f"step_{step + 1:06d}.bin")

    if out_dir:
        _write_metrics(history, out_dir / "metrics.csv")
        _write_timings(history, out_dir / "timings.csv")
        if ckpt_dir:
            save_checkpoint(state, ckpt_dir / "final.bin")
            if best_val < 0:  # steps == 0: still leave a best checkpoint
                save_checkpoint(state, ckpt_dir / "best.bin")
    return state, history


def train_erm_baseline(config: ExperimentConfig, dataset: DomainDataset | None = None):
    """Same plumbing with the penalty off and a deterministic head."""
    return train(replace(config, erm_baseline=True), dataset)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DRMLABCK"
CKPT_VERSION = 1


def save_checkpoint(state: TrainState, path) -> None:
    import struct

    path = Path(path)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
        sizes = state.extractor.layer_sizes
        f.write(struct.pack("<I", len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        theta = state.extractor.params_vector()
        f.write(struct.pack("<Q", theta.size))
        f.write(theta.astype("<f8").tobytes())
        bc.write_posterior(f, state.posterior)
        m = state.matrix
        f.write(struct.pack("<IdQ", m.n_classes, m.beta, m.update_count))
        f.write(m.rows.astype("<f8").tobytes())
        f.write(struct.pack("<Q", state.step))
        f.write(state.adam_m.astype("<f8").tobytes())
        f.write(state.adam_v.astype("<f8").tobytes())


def load_checkpoint(path) -> TrainState:
    import struct

    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(12)
        if head[:8] != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", head[8:])
        if version != CKPT_VERSION:
            raise ValueError(f"unknown checkpoint version {version}")
        (n_sizes,) = struct.unpack("<I", f.read(4))
        sizes = struct.unpack(f"<{n_sizes}I", f.read(4 * n_sizes))
        (n_theta,) = struct.unpack("<Q", f.read(8))
        theta = np.frombuffer(f.read(8 * n_theta), dtype="<f8").copy()
        extractor = FeatureExtractor(sizes, np.random.default_rng(0))
        extractor.set_params_vector(theta)
        posterior = bc.read_posterior(f)
        c, beta, update_count = struct.unpack("<IdQ", f.read(20))
        rows = np.frombuffer(f.read(8 * c * c), dtype="<f8").copy().reshape(c, c)
        matrix = DiscriminantMatrix(rows, beta, update_count)
        (step,) = struct.unpack("<Q", f.read(8))
        adam_m = np.frombuffer(f.read(8 * n_theta), dtype="<f8").copy()
        adam_v = np.frombuffer(f.read(8 * n_theta), dtype="<f8").copy()
    return TrainState(extractor, posterior, matrix, step, adam_m, adam_v)
