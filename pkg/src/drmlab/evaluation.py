"""Evaluation and theorem-verification suite.

Everything here is read-only over model snapshots. Models enter as plain
predictors: callables mapping a (n, d) feature array to (n, c) prediction
distributions. Adapters wrap trained states and the analytic oracles that
predict from only the invariant or only the spurious block of the
synthetic data.

The subset risk realizes the mass-difference integrand per class: the
total variation distance between a subset's mean prediction distribution
and the full source's, conditioned on the class and averaged over classes
with equal weight.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import bayes_classifier as bc
from .datagen import DomainDataset, GeneratorParams, class_directions, merge_datasets
from .discriminant import ClassBatchPrediction, cdr_penalty, init_matrix, slide_update
from .distributions import d_js, js, tv
from .numcore import softmax
from .trainer import ExperimentConfig, TrainState, train

EVAL_NOISE_TAG = 777


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------


def state_predictor(state: TrainState, samples: int = 3, seed: int = 0, frozen: bool = False):
    """Deterministic predictor over a training-state snapshot."""
    post = state.posterior
    if frozen:
        noise = np.zeros((samples, post.size))
    else:
        noise = np.empty((samples, post.size))
        for t in range(samples):
            gen = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, EVAL_NOISE_TAG, t))))
            noise[t] = gen.standard_normal(post.size)

    def predict(x):
        return bc.predict_proba(post, state.extractor.forward(x), samples, noise)

    return predict


def gaussian_cluster_predictor(centers, sigma: float):
    """Equal-prior Bayes rule for isotropic Gaussian clusters."""
    centers = np.asarray(centers, dtype=np.float64)

    def predict(x):
        x = np.asarray(x, dtype=np.float64)
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=-1)
        return softmax(-d2 / (2.0 * sigma**2))

    return predict


def invariant_oracle(dataset: DomainDataset):
    """Predicts from the invariant block only, using the true generator."""
    g = _require_generator(dataset)
    lo, hi = dataset.feature_layout.invariant
    inner = gaussian_cluster_predictor(np.asarray(g.class_means), g.sigma_inv)
    return lambda x: inner(np.asarray(x)[:, lo:hi])


def spurious_oracle(dataset: DomainDataset):
    """Predicts from the spurious block only, treating clusters as classes."""
    g = _require_generator(dataset)
    lo, hi = dataset.feature_layout.spurious
    if hi <= lo:
        raise ValueError("dataset has no spurious block")
    centers = g.spurious_center_scale * class_directions(dataset.n_classes, g.spurious_dim)
    inner = gaussian_cluster_predictor(centers, g.spec.spurious_scale)
    return lambda x: inner(np.asarray(x)[:, lo:hi])


def _require_generator(dataset: DomainDataset) -> GeneratorParams:
    if dataset.generator is None:
        raise ValueError("dataset carries no generator parameters")
    return dataset.generator


# ---------------------------------------------------------------------------
# Confusion matrices
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Row = true class, column = argmax prediction."""

    counts: np.ndarray
    domain_id: int = -1

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.counts.sum(), 1))

    def row_normalized(self, smoothing: float = 1.0) -> np.ndarray:
        sm = self.counts + smoothing
        return sm / sm.sum(axis=1, keepdims=True)


def confusion(predict, x, y, n_classes: int, domain_id: int = -1) -> ConfusionMatrix:
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty evaluation slice")
    pred = np.argmax(predict(x), axis=1)
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y, pred), 1)
    return ConfusionMatrix(counts, domain_id)


def confusion_divergence(confusions: list[ConfusionMatrix]) -> float:
    """Max pairwise JS between row-normalized (Laplace-smoothed) confusions."""
    if len(confusions) < 2:
        return 0.0
    normed = [cm.row_normalized() for cm in confusions]
    worst = 0.0
    for i in range(len(normed)):
        for j in range(i + 1, len(normed)):
            rows = [js(normed[i][k], normed[j][k]) for k in range(normed[i].shape[0])]
            worst = max(worst, float(np.mean(rows)))
    return worst


def confusion_to_csv(cm: ConfusionMatrix) -> str:
    c = cm.counts.shape[0]
    lines = ["true\\pred," + ",".join(str(j) for j in range(c))]
    for i in range(c):
        lines.append(str(i) + "," + ",".join(str(v) for v in cm.counts[i]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Discriminant risk
# ---------------------------------------------------------------------------


def _class_means(probs: np.ndarray, y: np.ndarray, n_classes: int):
    out = {}
    for label in range(n_classes):
        mask = y == label
        if mask.any():
            out[label] = probs[mask].mean(axis=0)
    return out


def risk_from_probs(sub_probs, sub_y, full_probs, full_y, n_classes: int) -> float:
    """Class-averaged tv between subset and full mean predictions."""
    sub_y = np.asarray(sub_y)
    full_y = np.asarray(full_y)
    if len(sub_y) == 0 or len(full_y) == 0:
        raise ValueError("empty subset or source")
    sub_means = _class_means(np.asarray(sub_probs), sub_y, n_classes)
    full_means = _class_means(np.asarray(full_probs), full_y, n_classes)
    vals = [tv(sub_means[c], full_means[c]) for c in sub_means if c in full_means]
    if not vals:
        raise ValueError("no shared classes between subset and source")
    return float(np.mean(vals))


def discriminant_risk(predict, subset_x, subset_y, full_x, full_y, n_classes: int) -> float:
    return risk_from_probs(
        predict(subset_x), subset_y, predict(full_x), full_y, n_classes
    )


# ---------------------------------------------------------------------------
# Theorem 1: upper bound over random disjoint splits
# ---------------------------------------------------------------------------


@dataclass
class SplitTrial:
    lhs: float
    mean_subset_risk: float
    min_djs_target: float
    max_djs_source: float
    rhs: float
    bound_satisfied: bool
    assumption_satisfied: bool


@dataclass
class RiskReport:
    n_splits: int
    trials: list

    @property
    def assumption_rate(self) -> float:
        return float(np.mean([t.assumption_satisfied for t in self.trials]))

    def violations_under_assumption(self) -> int:
        return sum(1 for t in self.trials if t.assumption_satisfied and not t.bound_satisfied)

    def to_dict(self) -> dict:
        return {
            "n_splits": self.n_splits,
            "trials": [asdict(t) for t in self.trials],
            "assumption_rate": self.assumption_rate,
            "violations_under_assumption": self.violations_under_assumption(),
        }


def _split_trial(src_probs, src_y, tgt_probs, tgt_y, n_classes, n_splits, rng) -> SplitTrial:
    n = len(src_y)
    perm = rng.permutation(n)
    chunks = np.array_split(perm, n_splits)
    full_means = _class_means(src_probs, src_y, n_classes)
    tgt_means = _class_means(tgt_probs, tgt_y, n_classes)

    lhs_terms, mean_risk_terms, min_t_terms, max_s_terms = [], [], [], []
    assumption = True
    for label, full_mean in full_means.items():
        if label not in tgt_means:
            continue
        chunk_means = []
        for chunk in chunks:
            mask = src_y[chunk] == label
            if mask.any():
                chunk_means.append(src_probs[chunk][mask].mean(axis=0))
        if not chunk_means:
            continue
        lhs_terms.append(tv(tgt_means[label], full_mean))
        mean_risk_terms.append(np.mean([tv(m, full_mean) for m in chunk_means]))
        d_target = [d_js(m, tgt_means[label]) for m in chunk_means]
        d_source = [d_js(m, full_mean) for m in chunk_means]
        min_t_terms.append(min(d_target))
        max_s_terms.append(max(d_source))
        pairwise = max(
            (d_js(a, b) for i, a in enumerate(chunk_means) for b in chunk_means[i + 1 :]),
            default=0.0,
        )
        if max(d_source) + 1e-12 < pairwise:
            assumption = False

    lhs = float(np.mean(lhs_terms))
    mean_risk = float(np.mean(mean_risk_terms))
    min_t = float(np.mean(min_t_terms))
    max_s = float(np.mean(max_s_terms))
    rhs = mean_risk + np.sqrt(2.0) * min_t + max_s
    return SplitTrial(lhs, mean_risk, min_t, max_s, rhs, lhs <= rhs + 1e-12, assumption)


def theorem1_check(
    predict,
    source_x,
    source_y,
    target_x,
    target_y,
    n_splits: int,
    trials: int,
    seed: int = 0,
    max_workers: int = 1,
) -> RiskReport:
    """Random disjoint splits of the source; checks lhs <= mean subset risk
    + sqrt(2) * min d_js(subset, target) + max d_js(subset, source)."""
    source_y = np.asarray(source_y, dtype=np.int64)
    target_y = np.asarray(target_y, dtype=np.int64)
    if n_splits < 2:
        raise ValueError(f"need at least 2 splits, got {n_splits}")
    if n_splits > len(source_y):
        raise ValueError(f"cannot split {len(source_y)} samples into {n_splits} nonempty parts")
    n_classes = int(max(source_y.max(), target_y.max())) + 1
    src_probs = np.asarray(predict(source_x))
    tgt_probs = np.asarray(predict(target_x))

    def run(i):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        return _split_trial(src_probs, source_y, tgt_probs, target_y, n_classes, n_splits, rng)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run, range(trials)))
    else:
        results = [run(i) for i in range(trials)]
    return RiskReport(n_splits, results)


# ---------------------------------------------------------------------------
# Theorem 2: sliding-matrix convergence under a constant-prediction model
# ---------------------------------------------------------------------------


def theorem2_check(beta: float = 0.95, updates: int = 500, n_classes: int = 3, seed: int = 0) -> dict:
    """Constant per-class predictions: the penalty must decay geometrically."""
    rng = np.random.default_rng(seed)
    constant = {y: rng.dirichlet(np.ones(n_classes)) for y in range(n_classes)}
    matrix = init_matrix(n_classes, beta)
    gaps = []
    cdr_at = {}
    for t in range(updates):
        preds = [ClassBatchPrediction(y, constant[y]) for y in range(n_classes)]
        matrix = slide_update(matrix, preds)
        gaps.append(max(np.abs(matrix.rows[y] - constant[y]).max() for y in range(n_classes)))
        if t + 1 in (1, updates):
            cdr_at[t + 1] = float(cdr_penalty(matrix, preds).value)
    # rate measured while the gap is still far above float resolution
    ratios = [gaps[i + 1] / gaps[i] for i in range(6)]
    rate = float(np.mean(ratios))
    final_cdr = cdr_at[updates]
    return {
        "beta": beta,
        "updates": updates,
        "final_cdr": final_cdr,
        "converged_below_1e-6": bool(final_cdr < 1e-6),
        "measured_decay_rate": rate,
        "expected_decay_rate": 1.0 - beta,
        "rate_within_10pct": bool(abs(rate - (1.0 - beta)) <= 0.1 * (1.0 - beta)),
    }


# ---------------------------------------------------------------------------
# Theorem 3: matrix-entry variance vs resampling count
# ---------------------------------------------------------------------------


def theorem3_check(
    resample_counts=(1, 3, 9, 27),
    repetitions: int = 200,
    steps: int = 80,
    burn_in: int = 20,
    beta: float = 0.95,
    seed: int = 0,
) -> dict:
    """With invariant oracle features and a stochastic head, the variance of
    matrix entries across updates should scale like 1/K in the resampling
    count. Returns the log-log regression slope."""
    rng = np.random.default_rng(seed)
    means = np.array([[1.0, 0.0], [-1.0, 0.0]])
    n_per_class = 16
    z = np.concatenate([means[y] + 0.3 * rng.standard_normal((n_per_class, 2)) for y in (0, 1)])
    y = np.repeat([0, 1], n_per_class)
    w_mu = 2.0 * means  # points at the class means; moderate confidence
    post_size = (2 + 1) * 2
    mu = np.concatenate([w_mu.ravel(), np.zeros(2)])
    sigma = np.full(post_size, 0.4)

    mean_vars = []
    for k in resample_counts:
        variances = np.empty(repetitions)
        for rep in range(repetitions):
            rep_rng = np.random.default_rng(np.random.SeedSequence((seed, k, rep)))
            matrix = init_matrix(2, beta)
            series = []
            for t in range(steps):
                probs = np.zeros((z.shape[0], 2))
                for _ in range(k):
                    flat = mu + rep_rng.standard_normal(post_size) * sigma
                    w, b = flat[:4].reshape(2, 2), flat[4:]
                    probs += softmax(z @ w.T + b)
                probs /= k
                preds = [
                    ClassBatchPrediction(0, probs[y == 0].mean(axis=0)),
                    ClassBatchPrediction(1, probs[y == 1].mean(axis=0)),
                ]
                matrix = slide_update(matrix, preds)
                if t >= burn_in:
                    series.append(matrix.rows.copy())
            variances[rep] = np.var(np.asarray(series), axis=0).mean()
        mean_vars.append(variances.mean())
    slope = float(np.polyfit(np.log(np.asarray(resample_counts, float)), np.log(mean_vars), 1)[0])
    return {
        "resample_counts": list(resample_counts),
        "mean_variances": [float(v) for v in mean_vars],
        "slope": slope,
        "slope_in_range": bool(-1.3 <= slope <= -0.7),
    }


# ---------------------------------------------------------------------------
# Theorem 4: transfer onto mixture targets
# ---------------------------------------------------------------------------


def log_likelihood(predict, x, y) -> float:
    probs = np.asarray(predict(x))
    picked = probs[np.arange(len(y)), np.asarray(y, dtype=np.int64)]
    return float(np.mean(np.log(np.maximum(picked, 1e-12))))


@dataclass
class TransferReport:
    target_log_likelihood: float
    source_log_likelihood: float
    log_likelihood_gap: float
    target_risk: float
    source_risk: float
    risk_gap: float

    def to_dict(self) -> dict:
        return asdict(self)


def theorem4_check(predict, sources: list[DomainDataset], target: DomainDataset) -> TransferReport:
    """Gap between source and mixture-target log-likelihood and risk."""
    merged = merge_datasets(sources)
    merged_probs = np.asarray(predict(merged.x))
    target_ll = log_likelihood(predict, target.x, target.y)
    source_ll = float(np.mean(np.log(np.maximum(
        merged_probs[np.arange(len(merged)), merged.y], 1e-12
    ))))
    source_risks = [
        risk_from_probs(predict(ds.x), ds.y, merged_probs, merged.y, merged.n_classes)
        for ds in sources
    ]
    target_risk = risk_from_probs(predict(target.x), target.y, merged_probs, merged.y, merged.n_classes)
    source_risk = float(np.mean(source_risks))
    return TransferReport(
        target_ll,
        source_ll,
        abs(target_ll - source_ll),
        target_risk,
        source_risk,
        abs(target_risk - source_risk),
    )


# ---------------------------------------------------------------------------
# Prediction uncertainty
# ---------------------------------------------------------------------------


def prediction_uncertainty(predict, x, y, n_classes: int) -> dict:
    """Per class: determinant of the covariance of the first c-1 prediction
    coordinates. Needs at least c+1 samples per measured class."""
    y = np.asarray(y, dtype=np.int64)
    probs = np.asarray(predict(x))
    out = {}
    for label in np.unique(y):
        rows = probs[y == label][:, : n_classes - 1]
        if rows.shape[0] < n_classes + 1:
            raise ValueError(
                f"class {label} has {rows.shape[0]} samples, need >= {n_classes + 1}"
            )
        cov = np.atleast_2d(np.cov(rows.T))
        out[int(label)] = float(np.linalg.det(cov))
    return out


# ---------------------------------------------------------------------------
# Run evaluation and comparison reports
# ---------------------------------------------------------------------------


@dataclass
class RunEvaluation:
    per_domain_accuracy: dict
    target_accuracy: float
    confusion_divergence: float
    target_risk: float
    mean_source_risk: float
    confusions: list

    def to_dict(self) -> dict:
        return {
            "per_domain_accuracy": {str(k): v for k, v in self.per_domain_accuracy.items()},
            "target_accuracy": self.target_accuracy,
            "confusion_divergence": self.confusion_divergence,
            "target_risk": self.target_risk,
            "mean_source_risk": self.mean_source_risk,
            "confusions": [
                {"domain_id": cm.domain_id, "counts": cm.counts.tolist()} for cm in self.confusions
            ],
        }


def evaluate_run(predict, sources: list[DomainDataset], target: DomainDataset) -> RunEvaluation:
    merged = merge_datasets(sources)
    merged_probs = np.asarray(predict(merged.x))
    confusions = []
    per_domain = {}
    source_risks = []
    for ds in sources:
        did = int(ds.domain_ids[0]) if len(ds) else -1
        cm = confusion(predict, ds.x, ds.y, ds.n_classes, did)
        confusions.append(cm)
        per_domain[did] = cm.accuracy()
        source_risks.append(risk_from_probs(predict(ds.x), ds.y, merged_probs, merged.y, ds.n_classes))
    target_cm = confusion(predict, target.x, target.y, target.n_classes, -1)
    target_risk = risk_from_probs(predict(target.x), target.y, merged_probs, merged.y, target.n_classes)
    return RunEvaluation(
        per_domain_accuracy=per_domain,
        target_accuracy=target_cm.accuracy(),
        confusion_divergence=confusion_divergence(confusions),
        target_risk=target_risk,
        mean_source_risk=float(np.mean(source_risks)),
        confusions=confusions,
    )


ABLATION_GRID = (
    ("erm", {"use_erm_term": True, "use_cdr_term": False}),
    ("cdr", {"use_erm_term": False, "use_cdr_term": True}),
    ("erm+cdr", {"use_erm_term": True, "use_cdr_term": True}),
)


def run_ablation_grid(
    base_config: ExperimentConfig,
    train_data: DomainDataset,
    sources: list[DomainDataset],
    target: DomainDataset,
    seeds,
) -> list[dict]:
    """Six-combination grid {erm, cdr, erm+cdr} x {bayes head on/off}."""
    from dataclasses import replace

    rows = []
    for loss_name, flags in ABLATION_GRID:
        for bayes in (True, False):
            accs = []
            for seed in seeds:
                cfg = replace(
                    base_config, seed=int(seed), freeze_sigma=not bayes, out_dir=None, **flags
                )
                state, _ = train(cfg, train_data)
                predict = state_predictor(state, cfg.samples, cfg.seed, frozen=cfg.freeze_sigma)
                accs.append(evaluate_run(predict, sources, target).target_accuracy)
            rows.append(
                {
                    "loss": loss_name,
                    "bayes_head": bayes,
                    "target_accuracy_mean": float(np.mean(accs)),
                    "target_accuracy_std": float(np.std(accs)),
                    "seeds": [int(s) for s in seeds],
                }
            )
    return rows


def compare_report(drm: RunEvaluation, erm: RunEvaluation, ablation_rows: list | None = None) -> dict:
    report = {
        "drm": drm.to_dict(),
        "erm": erm.to_dict(),
        "deltas": {
            "target_accuracy": drm.target_accuracy - erm.target_accuracy,
            "confusion_divergence": drm.confusion_divergence - erm.confusion_divergence,
            "target_risk": drm.target_risk - erm.target_risk,
        },
    }
    if ablation_rows is not None:
        report["ablation_grid"] = ablation_rows
    return report


def report_to_text(report: dict) -> str:
    lines = []
    header = f"{'metric':<28}{'drm':>12}{'erm':>12}{'delta':>12}"
    lines.append(header)
    lines.append("-" * len(header))
    for key in ("target_accuracy", "confusion_divergence", "target_risk"):
        d, e = report["drm"][key], report["erm"][key]
        lines.append(f"{key:<28}{d:>12.4f}{e:>12.4f}{d - e:>12.4f}")
    for domain, acc in sorted(report["drm"]["per_domain_accuracy"].items()):
        e_acc = report["erm"]["per_domain_accuracy"][domain]
        lines.append(f"{'accuracy@domain ' + domain:<28}{acc:>12.4f}{e_acc:>12.4f}{acc - e_acc:>12.4f}")
    if "ablation_grid" in report:
        lines.append("")
        lines.append(f"{'loss':<10}{'bayes_head':<12}{'target_acc':>12}{'std':>10}")
        for row in report["ablation_grid"]:
            lines.append(
                f"{row['loss']:<10}{str(row['bayes_head']):<12}"
                f"{row['target_accuracy_mean']:>12.4f}{row['target_accuracy_std']:>10.4f}"
            )
    return "\n".join(lines) + "\n"


def history_long_csv(history) -> str:
    """Plot-ready long format: step,series,value."""
    lines = ["step,series,value"]
    for m in history:
        for series in ("erm_loss", "cdr", "elbo", "val_acc"):
            lines.append(f"{m.step},{series},{getattr(m, series)!r}")
    return "\n".join(lines) + "\n"


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
