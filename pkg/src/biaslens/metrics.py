"""Quantitative bias diagnostics.

The headline questions, each reduced to a number: does the pooled content
code actually follow the standard normal prior; can a classifier recover
the dataset label from the code (a lower bound on their mutual
information); do projected or sampled images match the target dataset's
style statistics; and does projection preserve the ground-truth content.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import SampleSet, DatasetSpec, IMG_SIZE
from .errors import BiasLensError, DegenerateDataError
from .rng import RngStream
from .training import AdamState, adam_step

LAPLACIAN_FEATURE_SCALE = 10.0


def z_normality(zs: np.ndarray) -> tuple[float, float]:
    """(norm of the empirical mean, Frobenius distance of empirical cov to I)."""
    zs = np.atleast_2d(zs)
    if zs.shape[0] < 2:
        raise BiasLensError("z_normality needs at least 2 samples")
    mean = zs.mean(axis=0)
    cov = np.cov(zs, rowvar=False)
    cov = np.atleast_2d(cov)
    d = zs.shape[1]
    return float(np.linalg.norm(mean)), float(np.linalg.norm(cov - np.eye(d)))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _stratified_half(ys: np.ndarray, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    a_idx, b_idx = [], []
    for label in np.unique(ys):
        idx = np.flatnonzero(ys == label)
        perm = idx[rng.split(int(label)).permutation(idx.size)]
        half = idx.size // 2
        a_idx.append(perm[:half])
        b_idx.append(perm[half:])
    return np.concatenate(a_idx), np.concatenate(b_idx)


def label_probe(zs: np.ndarray, ys: np.ndarray, seed: int, steps: int = 400, lr: float = 0.05) -> tuple[float, float]:
    """Multinomial logistic probe: can the dataset be told from the code?

    Trains on a stratified half, evaluates on the other half. Returns
    (test accuracy, mutual-information lower bound in nats), the bound
    being H(y) minus the test cross-entropy, floored at zero.
    """
    zs = np.atleast_2d(zs)
    ys = np.asarray(ys, dtype=np.int64)
    classes = np.unique(ys)
    if classes.size < 2:
        raise BiasLensError("label_probe needs at least 2 labels")
    remap = {int(c): i for i, c in enumerate(classes)}
    ys = np.array([remap[int(y)] for y in ys])
    k = classes.size

    rng = RngStream(seed, "label-probe")
    tr, te = _stratified_half(ys, rng.split("split"))
    mu, sd = zs[tr].mean(axis=0), zs[tr].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xtr, xte = (zs[tr] - mu) / sd, (zs[te] - mu) / sd
    ytr, yte = ys[tr], ys[te]

    d = zs.shape[1]
    w = np.zeros((d, k))
    b = np.zeros(k)
    onehot = np.zeros((tr.size, k))
    onehot[np.arange(tr.size), ytr] = 1.0
    state = AdamState([w, b])
    for _ in range(steps):
        p = _softmax(xtr @ w + b)
        g = (p - onehot) / tr.size
        adam_step([w, b], [xtr.T @ g, g.sum(axis=0)], state, lr)

    p_test = _softmax(xte @ w + b)
    accuracy = float((p_test.argmax(axis=1) == yte).mean())
    ce = float(-np.log(np.clip(p_test[np.arange(te.size), yte], 1e-300, None)).mean())
    counts = np.bincount(yte, minlength=k) / te.size
    entropy = float(-(counts[counts > 0] * np.log(counts[counts > 0])).sum())
    return accuracy, max(0.0, entropy - ce)


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def gaussian_w2(a: np.ndarray, b: np.ndarray, ridge: float = 1e-6) -> float:
    """Squared 2-Wasserstein distance between Gaussian fits of two samples."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise BiasLensError(f"gaussian_w2 needs more than {d} samples per side")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False) + ridge * np.eye(d)
    cov_b = np.cov(b, rowvar=False) + ridge * np.eye(d)
    root_b = _sym_sqrt(cov_b)
    cross = _sym_sqrt(root_b @ cov_a @ root_b)
    val = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a + cov_b - 2.0 * cross))
    return max(val, 0.0)


def laplacian_energy(pixels: np.ndarray) -> np.ndarray:
    """Mean squared 4-neighbor Laplacian per image; a sharpness/detail score."""
    imgs = np.atleast_2d(pixels).reshape(-1, IMG_SIZE, IMG_SIZE, 3)
    pad = np.pad(imgs, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    lap = (
        pad[:, :-2, 1:-1] + pad[:, 2:, 1:-1] + pad[:, 1:-1, :-2] + pad[:, 1:-1, 2:] - 4.0 * imgs
    )
    return (lap**2).mean(axis=(1, 2, 3))


def style_features(pixels: np.ndarray) -> np.ndarray:
    """Per-image style statistics: channel means and (scaled) Laplacian energy."""
    imgs = np.atleast_2d(pixels).reshape(-1, IMG_SIZE, IMG_SIZE, 3)
    means = imgs.mean(axis=(1, 2))
    lap = laplacian_energy(pixels) * LAPLACIAN_FEATURE_SCALE
    return np.column_stack([means, lap])


@dataclass
class ContentProbe:
    """Ridge regressor from pixels to the ground-truth content factors."""

    w: np.ndarray  # (768, content_dim)
    b: np.ndarray  # (content_dim,)

    def predict(self, pixels: np.ndarray) -> np.ndarray:
        return np.atleast_2d(pixels) @ self.w + self.b


def fit_content_probe(pixels: np.ndarray, content: np.ndarray, ridge_per_sample: float = 1e-3) -> ContentProbe:
    x = np.atleast_2d(pixels)
    y = np.atleast_2d(content)
    if np.allclose(y.std(axis=0), 0):
        raise DegenerateDataError("content targets are constant")
    n, p = x.shape
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mu_x, y - mu_y
    gram = xc.T @ xc + ridge_per_sample * n * np.eye(p)
    w = np.linalg.solve(gram, xc.T @ yc)
    return ContentProbe(w=w, b=mu_y - mu_x @ w)


def r2_per_dim(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred, target = np.atleast_2d(pred), np.atleast_2d(target)
    ss_res = ((pred - target) ** 2).sum(axis=0)
    ss_tot = ((target - target.mean(axis=0)) ** 2).sum(axis=0)
    return 1.0 - ss_res / ss_tot


@dataclass
class BiasReport:
    dataset_names: list[str]
    z_mean_norm: float
    z_cov_fro_dist: float
    probe_accuracy: float
    probe_chance: float
    mi_lower_bound: float
    baseline_accuracy: float
    distance_matrix: list[list[float]]
    sample_match_w2: list[list[float]]
    content_r2_sanity: list[float]
    content_r2_projected: dict[str, list[float]]
    style_stats: dict[str, dict]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def distance_csv(self) -> str:
        lines = ["dataset," + ",".join(self.dataset_names)]
        for name, row in zip(self.dataset_names, self.distance_matrix):
            lines.append(name + "," + ",".join(repr(v) for v in row))
        return "\n".join(lines) + "\n"


def build_report(
    pipeline,
    eval_set: SampleSet,
    seed: int,
    n_sample: int = 500,
    max_project: int = 400,
) -> BiasReport:
    """Compute every diagnostic on held-out data. Deterministic given seed.

    The content probe is fit on one stratified half of `eval_set` and
    scored on the other half, which is also what gets projected, so probe
    fitting never sees a projected image or its source.
    """
    registry: list[DatasetSpec] = pipeline.registry
    names = [s.name for s in registry]
    n_ds = len(names)
    ys = eval_set.labels

    x_std = pipeline.encode_std(eval_set.pixels)
    z = pipeline.content_codes(eval_set.pixels, ys)

    z_mean_norm, z_cov_fro = z_normality(z)
    probe_acc, mi_bound = label_probe(z, ys, seed)
    baseline_acc, _ = label_probe(x_std, ys, seed)
    chance = float(np.bincount(ys, minlength=n_ds).max() / ys.size)

    feats_real = [style_features(eval_set.for_label(i).pixels) for i in range(n_ds)]
    distance_matrix = [
        [0.0 if i == j else gaussian_w2(feats_real[i], feats_real[j]) for j in range(n_ds)] for i in range(n_ds)
    ]
    sample_match = []
    for i in range(n_ds):
        sampled = pipeline.sample(i, n_sample, seed)
        fs = style_features(sampled)
        sample_match.append([gaussian_w2(fs, feats_real[j]) for j in range(n_ds)])

    rng = RngStream(seed, "report")
    fit_idx, test_idx = _stratified_half(ys, rng.split("probe-split"))
    probe = fit_content_probe(eval_set.pixels[fit_idx], eval_set.content[fit_idx])
    test = eval_set.subset(test_idx)
    sanity = r2_per_dim(probe.predict(test.pixels), test.content)

    content_r2_projected: dict[str, list[float]] = {}
    for src in range(n_ds):
        src_set = test.for_label(src)
        if len(src_set) > max_project:
            src_set = src_set.subset(np.arange(max_project))
        for tgt in range(n_ds):
            if src == tgt:
                continue
            projected = pipeline.project(src_set.pixels, src, tgt)
            r2 = r2_per_dim(probe.predict(projected), src_set.content)
            content_r2_projected[f"{names[src]}->{names[tgt]}"] = [float(v) for v in r2]

    style_stats = {}
    for i, name in enumerate(names):
        px = eval_set.for_label(i).pixels
        style_stats[name] = {
            "mean_brightness": float(px.mean()),
            "mean_laplacian_energy": float(laplacian_energy(px).mean()),
        }

    return BiasReport(
        dataset_names=names,
        z_mean_norm=z_mean_norm,
        z_cov_fro_dist=z_cov_fro,
        probe_accuracy=probe_acc,
        probe_chance=chance,
        mi_lower_bound=mi_bound,
        baseline_accuracy=baseline_acc,
        distance_matrix=[[float(v) for v in row] for row in distance_matrix],
        sample_match_w2=[[float(v) for v in row] for row in sample_match],
        content_r2_sanity=[float(v) for v in sanity],
        content_r2_projected=content_r2_projected,
        style_stats=style_stats,
    )
