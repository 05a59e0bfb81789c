"""Empirical chosen-plaintext indistinguishability harness.

The game: fix two equal-length messages, encrypt each many times under
fresh nonces, and train binary classifiers to tell the resulting subspace
vectors apart.  A classifier whose held-out accuracy beats coin flipping
(exact one-sided binomial test, p < 0.05) demonstrates ciphertext leakage.

Classifiers are deliberately simple and self-contained: k-nearest
neighbors with cross-validated k, linear discriminant analysis with ridge
shrinkage, and a small two-layer ReLU network.  Each runs on two input
modes: the full ciphertext vector and a six-dimensional summary feature
vector (mean, population std, max, min, L1, L2).
"""

from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from random import Random

import numpy as np

from . import cipher, lm, training

DATASET_MAGIC = b"SLDS"
DATASET_VERSION = 1

FEATURE_NAMES = ("mean", "std", "max", "min", "l1", "l2")
CLASSIFIERS = ("knn", "lda", "ffnn")
MODES = ("full", "features")


class CorpusGenerationError(RuntimeError):
    """An encryption kept failing after the bounded retry budget."""


@dataclass(frozen=True)
class CiphertextDataset:
    vectors: np.ndarray    # (n, d) float32 subspace vectors
    labels: np.ndarray     # (n,) uint8 in {0, 1}, balanced
    train_idx: np.ndarray
    test_idx: np.ndarray
    meta: dict

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ReportCell:
    pair: str
    classifier: str
    mode: str
    accuracy: float
    n_test: int
    successes: int
    p_value: float
    reject_null: bool


@dataclass(frozen=True)
class AttackReport:
    cells: tuple           # ReportCell, ordered pair > classifier > mode
    mutual_information: dict  # pair -> length-6 array (train set, nats)


def _derive_seed(master_seed: int, *parts) -> int:
    h = hashlib.sha256(str(master_seed).encode())
    for p in parts:
        h.update(b"|")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "little")


def _encrypt_once(args):
    key, message, model, train_config, seed, max_retries = args
    rng = Random(seed)
    failures = 0
    while True:
        try:
            ct = cipher.encrypt(key, message, model, train_config, rng=rng)
            return ct.theta_d_star, failures
        except cipher.EncryptionBudgetExceeded:
            failures += 1
            if failures > max_retries:
                raise CorpusGenerationError(
                    f"encryption failed {failures} times for one example"
                )


def generate_corpus(
    key: cipher.SecretKey,
    m0: bytes,
    m1: bytes,
    n_per_class: int,
    train_frac: float,
    model: lm.Checkpoint,
    train_config: training.TrainConfig,
    master_seed: int,
    max_retries: int = 5,
    jobs: int = 1,
    pair_name: str = "pair",
) -> CiphertextDataset:
    """n_per_class independent encryptions of each message, labeled and
    split. Deterministic given master_seed regardless of `jobs`."""
    if m0 == m1:
        raise ValueError("m0 and m1 must differ")
    if len(lm.tokenize(m0)) != len(lm.tokenize(m1)):
        raise ValueError("m0 and m1 must have equal token length")
    tasks = []
    for label, msg in ((0, m0), (1, m1)):
        for i in range(n_per_class):
            seed = _derive_seed(master_seed, pair_name, label, i)
            tasks.append((key, msg, model, train_config, seed, max_retries))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_encrypt_once, tasks, chunksize=4))
    else:
        results = [_encrypt_once(t) for t in tasks]

    vectors = np.stack([r[0] for r in results]).astype(np.float32)
    retries = sum(r[1] for r in results)
    labels = np.repeat(np.arange(2, dtype=np.uint8), n_per_class)

    n_train = int(round(n_per_class * train_frac))
    train_idx, test_idx = [], []
    for label in (0, 1):
        base = label * n_per_class
        train_idx += list(range(base, base + n_train))
        test_idx += list(range(base + n_train, base + n_per_class))
    return CiphertextDataset(
        vectors=vectors,
        labels=labels,
        train_idx=np.array(train_idx),
        test_idx=np.array(test_idx),
        meta={
            "pair": pair_name,
            "d": train_config.d,
            "regularizer": train_config.regularizer.kind,
            "retries": retries,
        },
    )


def extract_features(theta_d: np.ndarray) -> np.ndarray:
    """(mean, population std, max, min, L1 norm, L2 norm)."""
    x = np.asarray(theta_d, dtype=np.float64)
    if x.size < 1:
        raise ValueError("need at least one coordinate")
    return np.array(
        [
            x.mean(),
            x.std(),
            x.max(),
            x.min(),
            np.abs(x).sum(),
            np.linalg.norm(x),
        ]
    )


def feature_matrix(vectors: np.ndarray) -> np.ndarray:
    return np.stack([extract_features(v) for v in vectors])


def _euclidean_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))


def _knn_predict(train_x, train_y, queries, k: int) -> np.ndarray:
    dist = _euclidean_distances(queries, train_x)
    # stable argsort: distance ties resolve to the lower train index
    nearest = np.argsort(dist, axis=1, kind="stable")[:, : min(k, train_x.shape[0])]
    votes = train_y[nearest].astype(np.int64)
    ones = votes.sum(axis=1)
    zeros = votes.shape[1] - ones
    # vote ties resolve to the lower label
    return (ones > zeros).astype(np.uint8)


def knn_classify(train_x, train_y, test_x, test_y, ks=(5, 25, 100)) -> float:
    """Majority vote over Euclidean neighbors; k chosen by 5-fold CV on the
    training split (ties prefer the smaller k). Inputs are used raw."""
    ks = sorted(ks)
    if len(train_x) < max(ks):
        raise ValueError("training split smaller than the largest candidate k")
    folds = np.arange(len(train_x)) % 5
    best_k, best_acc = None, -1.0
    for k in ks:
        correct = 0
        for f in range(5):
            tr, va = folds != f, folds == f
            pred = _knn_predict(train_x[tr], train_y[tr], train_x[va], k)
            correct += int((pred == train_y[va]).sum())
        acc = correct / len(train_x)
        if acc > best_acc:
            best_k, best_acc = k, acc
    pred = _knn_predict(train_x, train_y, test_x, best_k)
    return float((pred == test_y).mean())


def _standardize(train_x, test_x):
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    return (train_x - mu) / sd, (test_x - mu) / sd


def lda_classify(train_x, train_y, test_x, test_y, ridge: float = 0.1) -> float:
    """Two-class linear discriminant with pooled covariance and ridge
    shrinkage Sigma + ridge * trace(Sigma)/p * I; features standardized to
    train statistics; equal priors; score ties resolve to label 0."""
    if min((train_y == 0).sum(), (train_y == 1).sum()) < 2:
        raise ValueError("need >= 2 training examples per class")
    train_x, test_x = _standardize(
        np.asarray(train_x, dtype=np.float64), np.asarray(test_x, dtype=np.float64)
    )
    mu0 = train_x[train_y == 0].mean(axis=0)
    mu1 = train_x[train_y == 1].mean(axis=0)
    centered = train_x.copy()
    centered[train_y == 0] -= mu0
    centered[train_y == 1] -= mu1
    p = train_x.shape[1]
    sigma = centered.T @ centered / (len(train_x) - 2)
    sigma = sigma + ridge * (np.trace(sigma) / p) * np.eye(p)
    w = np.linalg.solve(sigma, mu1 - mu0)
    b = -0.5 * float(w @ (mu0 + mu1))
    pred = (test_x @ w + b > 0).astype(np.uint8)
    return float((pred == test_y).mean())


def ffnn_classify(
    train_x, train_y, test_x, test_y, input_mode: str, seed: int = 0
) -> float:
    """Two-layer ReLU network with dropout 0.1 after the activation,
    AdamW (lr 3e-4, weight decay 0.1), batch size 32, training stopped
    once the epoch loss has not improved for more than five epochs.

    Hidden width is 1000 on full ciphertext input and 256 on features.
    Inputs are standardized to train statistics.
    """
    hidden = 1000 if input_mode == "full" else 256
    train_x, test_x = _standardize(
        np.asarray(train_x, dtype=np.float64), np.asarray(test_x, dtype=np.float64)
    )
    n, p = train_x.shape
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / math.sqrt(p), size=(p, hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, 2))
    b2 = np.zeros(2)
    params = [w1, b1, w2, b2]
    mom = [np.zeros_like(q) for q in params]
    vel = [np.zeros_like(q) for q in params]
    lr, wd, beta1, beta2, eps = 3e-4, 0.1, 0.9, 0.999, 1e-8
    dropout = 0.1

    best_loss = math.inf
    stagnant = 0
    t = 0
    onehot = np.eye(2)[train_y]
    for epoch in range(500):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, 32):
            idx = order[start : start + 32]
            xb, yb = train_x[idx], onehot[idx]
            h = xb @ w1 + b1
            relu = np.maximum(h, 0.0)
            keep = (rng.random(relu.shape) >= dropout) / (1.0 - dropout)
            hd = relu * keep
            logits = hd @ w2 + b2
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            epoch_loss += float(-(yb * np.log(probs + 1e-300)).sum())
            dlogits = (probs - yb) / len(idx)
            dh = (dlogits @ w2.T) * keep * (h > 0)
            grads = [xb.T @ dh, dh.sum(axis=0), hd.T @ dlogits, dlogits.sum(axis=0)]
            t += 1
            for q, g, mq, vq in zip(params, grads, mom, vel):
                mq *= beta1
                mq += (1 - beta1) * g
                vq *= beta2
                vq += (1 - beta2) * g**2
                mhat = mq / (1 - beta1**t)
                vhat = vq / (1 - beta2**t)
                q -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * q)
        epoch_loss /= n
        if epoch_loss < best_loss - 1e-12:
            best_loss = epoch_loss
            stagnant = 0
        else:
            stagnant += 1
            if stagnant > 5:
                break

    logits = np.maximum(test_x @ w1 + b1, 0.0) @ w2 + b2
    pred = logits.argmax(axis=1).astype(np.uint8)
    return float((pred == test_y).mean())


def binomial_test(successes: int, n: int, p0: float = 0.5) -> float:
    """Exact one-sided tail P[X >= successes] for X ~ Binomial(n, p0),
    computed in log space."""
    if not 0 <= successes <= n or n < 1:
        raise ValueError("need 0 <= successes <= n and n >= 1")
    log_p = math.log(p0)
    log_q = math.log1p(-p0)
    terms = [
        math.lgamma(n + 1)
        - math.lgamma(i + 1)
        - math.lgamma(n - i + 1)
        + i * log_p
        + (n - i) * log_q
        for i in range(successes, n + 1)
    ]
    hi = max(terms)
    total = hi + math.log(sum(math.exp(t - hi) for t in terms))
    return min(1.0, math.exp(total))


def feature_mutual_information(
    vectors: np.ndarray, labels: np.ndarray, bins: int = 16
) -> np.ndarray:
    """Plug-in mutual information (nats) between each summary feature and
    the label, using equal-frequency binning; clipped at zero."""
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise ValueError("need both labels present")
    feats = feature_matrix(vectors)
    n = len(labels)
    out = np.zeros(feats.shape[1])
    for j in range(feats.shape[1]):
        x = feats[:, j]
        edges = np.quantile(x, np.arange(1, bins) / bins)
        cells = np.searchsorted(edges, x, side="right")
        mi = 0.0
        for b in np.unique(cells):
            nb = cells == b
            pb = nb.sum() / n
            for y in (0, 1):
                pby = (nb & (labels == y)).sum() / n
                py = (labels == y).sum() / n
                if pby > 0:
                    mi += pby * math.log(pby / (pb * py))
        out[j] = max(0.0, mi)
    return out


def _cell_inputs(dataset: CiphertextDataset, mode: str):
    x = dataset.vectors.astype(np.float64) if mode == "full" else feature_matrix(
        dataset.vectors
    )
    return (
        x[dataset.train_idx],
        dataset.labels[dataset.train_idx],
        x[dataset.test_idx],
        dataset.labels[dataset.test_idx],
    )


def run_game(
    datasets: dict,
    classifiers=CLASSIFIERS,
    modes=MODES,
    master_seed: int = 0,
) -> AttackReport:
    """Evaluate every classifier x input-mode cell on every message pair
    and attach exact binomial p-values; mutual information is estimated on
    each pair's training split."""
    cells = []
    mi = {}
    for pair, ds in datasets.items():
        for clf in classifiers:
            for mode in modes:
                train_x, train_y, test_x, test_y = _cell_inputs(ds, mode)
                if clf == "knn":
                    acc = knn_classify(train_x, train_y, test_x, test_y)
                elif clf == "lda":
                    acc = lda_classify(train_x, train_y, test_x, test_y)
                elif clf == "ffnn":
                    acc = ffnn_classify(
                        train_x,
                        train_y,
                        test_x,
                        test_y,
                        mode,
                        seed=_derive_seed(master_seed, pair, clf, mode),
                    )
                else:
                    raise ValueError(f"unknown classifier {clf!r}")
                n_test = len(test_y)
                successes = int(round(acc * n_test))
                p = binomial_test(successes, n_test)
                cells.append(
                    ReportCell(pair, clf, mode, acc, n_test, successes, p, p < 0.05)
                )
        mi[pair] = feature_mutual_information(
            ds.vectors[ds.train_idx], ds.labels[ds.train_idx]
        )
    return AttackReport(tuple(cells), mi)


def save_dataset(path, dataset: CiphertextDataset) -> None:
    n, d = dataset.vectors.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<BII", DATASET_VERSION, d, n))
        for vec, label in zip(dataset.vectors, dataset.labels):
            fh.write(struct.pack("<B", int(label)))
            fh.write(vec.astype("<f4").tobytes())


def load_dataset(path, train_frac: float = 0.8) -> CiphertextDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise ValueError("not a ciphertext dataset (bad magic)")
    version, d, n = struct.unpack_from("<BII", blob, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    pos = 13
    vectors = np.empty((n, d), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        labels[i] = blob[pos]
        pos += 1
        vectors[i] = np.frombuffer(blob, dtype="<f4", offset=pos, count=d)
        pos += 4 * d
    if pos != len(blob):
        raise ValueError("trailing bytes in dataset file")
    # splits are positional per class: the first round(frac * n_c) of each
    # class's records are the training split
    train_idx, test_idx = [], []
    for label in (0, 1):
        members = np.nonzero(labels == label)[0]
        k = int(round(len(members) * train_frac))
        train_idx += members[:k].tolist()
        test_idx += members[k:].tolist()
    return CiphertextDataset(
        vectors, labels, np.array(train_idx), np.array(test_idx), {"d": d}
    )


def report_to_kv(report: AttackReport) -> str:
    """Machine-readable grid, one cell per line."""
    lines = []
    for c in report.cells:
        lines.append(
            f"pair={c.pair} classifier={c.classifier} mode={c.mode} "
            f"accuracy={c.accuracy:.4f} n_test={c.n_test} "
            f"successes={c.successes} p_value={c.p_value:.6g} "
            f"reject={int(c.reject_null)}"
        )
    for pair, mi in report.mutual_information.items():
        for name, val in zip(FEATURE_NAMES, mi):
            lines.append(f"pair={pair} mi.{name}={val:.6f}")
    return "\n".join(lines) + "\n"


def report_to_text(report: AttackReport) -> str:
    """Human-readable table mirroring the classifier x mode grid.  The SVM
    and gradient-boosting columns are reserved but absent."""
    all_clfs = ("knn", "lda", "svm", "gradboost", "ffnn")
    by_pair = {}
    for c in report.cells:
        by_pair.setdefault(c.pair, {})[(c.classifier, c.mode)] = c
    header = ["pair".ljust(12)] + [
        f"{clf}/{mode}".rjust(14) for clf in all_clfs for mode in MODES
    ]
    lines = ["".join(header)]
    for pair, cells in by_pair.items():
        row = [pair.ljust(12)]
        for clf in all_clfs:
            for mode in MODES:
                c = cells.get((clf, mode))
                if c is None:
                    row.append("-".rjust(14))
                else:
                    mark = "*" if c.reject_null else " "
                    row.append(f"{c.accuracy:.2f}{mark}".rjust(14))
        lines.append("".join(row))
    lines.append("(* rejects the null hypothesis of random guessing, p < 0.05)")
    return "\n".join(lines) + "\n"
