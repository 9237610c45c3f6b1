"""Conditional invertible network mapping representations to content codes.

The map is bijective in x for every dataset label y. Each block applies,
in order: an ActNorm affine (data-initialized, strictly positive scales),
a fixed seeded permutation (zero log-det), and an affine coupling whose
scale/shift come from a conditioner MLP fed with the passive half of the
vector concatenated with the label's learned embedding. Coupling scales
are clamped to |s| <= alpha via s -> alpha * tanh(s / alpha), so the block
is invertible for any parameter values reachable by training.

Log-density follows the change of variables against a standard normal
base: log p(x|y) = log N(tau(x|y); 0, I) + log|det J|, where the log-det
is the sum of ActNorm log-scales and clamped coupling scales.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ActNormStateError, DegenerateDataError, ShapeError, UnknownDatasetError
from .nn import Dense, Mlp
from .rng import RngStream
from .tensor import Graph, Tensor, add, concat, exp, matmul, mul, scale, slice_cols, sum_all, tanh

LOG_2PI = math.log(2.0 * math.pi)


class FlowBlock:
    def __init__(self, d: int, net: Mlp, perm: np.ndarray, flip: bool, alpha: float):
        self.d = d
        self.split = d // 2
        self.n_active = d - self.split
        self.net = net
        self.perm = np.asarray(perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(d)):
            raise ShapeError("permutation is not a bijection on indices")
        pmat = np.zeros((d, d))
        pmat[self.perm, np.arange(d)] = 1.0
        self.pmat = Tensor(pmat)  # constant, z = x @ pmat
        self.flip = flip
        self.alpha = float(alpha)
        self.log_scale = Tensor(np.zeros(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.initialized = False

    def params(self) -> list[Tensor]:
        return [self.log_scale, self.bias] + self.net.params()

    def _split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if self.flip:
            return slice_cols(x, self.d - self.split, self.d), slice_cols(x, 0, self.n_active)
        return slice_cols(x, 0, self.split), slice_cols(x, self.split, self.d)

    def _scale_shift(self, passive: Tensor, emb: Tensor) -> tuple[Tensor, Tensor]:
        st = self.net(concat([passive, emb]))
        s_raw = slice_cols(st, 0, self.n_active)
        t = slice_cols(st, self.n_active, 2 * self.n_active)
        s = scale(tanh(scale(s_raw, 1.0 / self.alpha)), self.alpha)
        return s, t

    def forward_t(self, x: Tensor, emb: Tensor) -> tuple[Tensor, Tensor]:
        """One block forward; returns (output, clamped coupling scales)."""
        x = mul(add(x, scale(self.bias, -1.0)), exp(self.log_scale))
        x = matmul(x, self.pmat)
        passive, active = self._split(x)
        s, t = self._scale_shift(passive, emb)
        new_active = add(mul(active, exp(s)), t)
        if self.flip:
            out = concat([new_active, passive])
        else:
            out = concat([passive, new_active])
        return out, s

    def inverse_np(self, z: np.ndarray, emb: np.ndarray) -> np.ndarray:
        """Exact algebraic inverse of forward_t, plain numpy."""
        if self.flip:
            passive = z[:, self.n_active :]
            active = z[:, : self.n_active]
        else:
            passive = z[:, : self.split]
            active = z[:, self.split :]
        s, t = self._scale_shift(Tensor(passive), Tensor(emb))
        orig_active = (active - t.data) * np.exp(-s.data)
        if self.flip:
            x = np.concatenate([orig_active, passive], axis=1)
        else:
            x = np.concatenate([passive, orig_active], axis=1)
        x = x @ self.pmat.data.T
        return x * np.exp(-self.log_scale.data) + self.bias.data


class FlowModel:
    def __init__(self, blocks: list[FlowBlock], embedding: Tensor, d: int, alpha: float):
        self.blocks = blocks
        self.embedding = embedding  # (n_datasets, e), learned
        self.d = d
        self.n_datasets, self.e = embedding.shape
        self.alpha = alpha

    @classmethod
    def create(cls, rng: RngStream, d: int, n_datasets: int, e: int = 8, n_blocks: int = 8,
               hidden: int = 128, alpha: float = 2.0) -> "FlowModel":
        """Near-identity init: conditioner output layers start at zero, ActNorm
        awaits data initialization."""
        blocks = []
        for i in range(n_blocks):
            split = d // 2
            n_active = d - split
            net = Mlp.init([split + e, hidden, 2 * n_active], rng.split(f"block{i}/net"), zero_last=True)
            perm = rng.split(f"block{i}/perm").permutation(d)
            blocks.append(FlowBlock(d, net, perm, flip=bool(i % 2), alpha=alpha))
        emb = Tensor(rng.split("embedding").normal(size=(n_datasets, e), scale=0.5), requires_grad=True)
        return cls(blocks, emb, d, alpha)

    @classmethod
    def identity(cls, d: int, n_datasets: int, e: int = 8, n_blocks: int = 2, alpha: float = 2.0) -> "FlowModel":
        """All-zero conditioners, unit ActNorm, identity permutations: z = x."""
        blocks = []
        for i in range(n_blocks):
            split = d // 2
            n_active = d - split
            net = Mlp([Dense.zeros(split + e, 4), Dense.zeros(4, 2 * n_active)])
            block = FlowBlock(d, net, np.arange(d), flip=bool(i % 2), alpha=alpha)
            block.initialized = True
            blocks.append(block)
        return cls(blocks, Tensor(np.zeros((n_datasets, e)), requires_grad=True), d, alpha)

    @classmethod
    def random(cls, rng: RngStream, d: int, n_datasets: int, e: int = 4, n_blocks: int = 3,
               hidden: int = 16, alpha: float = 2.0) -> "FlowModel":
        """Fully randomized small model (ActNorm included); used by exactness tests."""
        model = cls.create(rng, d, n_datasets, e=e, n_blocks=n_blocks, hidden=hidden, alpha=alpha)
        for i, block in enumerate(model.blocks):
            brng = rng.split(f"rand{i}")
            last = block.net.layers[-1]
            last.weight.data[:] = brng.normal(size=last.weight.shape, scale=0.4)
            last.bias.data[:] = brng.normal(size=last.bias.shape, scale=0.2)
            block.log_scale.data[:] = brng.normal(size=d, scale=0.3)
            block.bias.data[:] = brng.normal(size=d, scale=0.5)
            block.initialized = True
        return model

    def params(self) -> list[Tensor]:
        out = [self.embedding]
        for block in self.blocks:
            out.extend(block.params())
        return out

    def _check_ready(self, ys: np.ndarray) -> None:
        if not all(b.initialized for b in self.blocks):
            raise ActNormStateError("ActNorm not initialized; run actnorm_data_init first")
        ys = np.asarray(ys)
        if ys.size and (ys.min() < 0 or ys.max() >= self.n_datasets):
            raise UnknownDatasetError(f"label out of range 0..{self.n_datasets - 1}")

    def forward_parts(self, x: Tensor, onehot: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Graph-building forward; returns (z, per-block coupling scales)."""
        emb = matmul(onehot, self.embedding)
        scales = []
        for block in self.blocks:
            x, s = block.forward_t(x, emb)
            scales.append(s)
        return x, scales

    def forward(self, x: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """z = tau(x|y) with per-sample log-det; x (n, d), ys (n,) int."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ys = np.asarray(ys, dtype=np.int64)
        self._check_ready(ys)
        z, scales = self.forward_parts(Tensor(x), Tensor(_onehot(ys, self.n_datasets)))
        logdet = np.zeros(x.shape[0])
        for s in scales:
            logdet += s.data.sum(axis=1)
        for block in self.blocks:
            logdet += block.log_scale.data.sum()
        return z.data, logdet

    def inverse(self, z: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """x = tau^{-1}(z|y); exact inverse per block in reverse order."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        ys = np.asarray(ys, dtype=np.int64)
        self._check_ready(ys)
        emb = self.embedding.data[ys]
        for block in reversed(self.blocks):
            z = block.inverse_np(z, emb)
        return z

    def log_prob(self, x: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """log p(x|y) under the standard normal base distribution, per sample."""
        z, logdet = self.forward(x, ys)
        return -0.5 * self.d * LOG_2PI - 0.5 * (z**2).sum(axis=1) + logdet

    def nll_loss_t(self, x: np.ndarray, ys: np.ndarray, moment_weight: float = 0.0,
                   directions: np.ndarray | None = None) -> Tensor:
        """Scalar batch-mean negative log-likelihood, built on the active graph.

        With moment_weight > 0, adds a prior-moment penalty: the squared batch
        mean of z plus squared deviations of E[(u^T z)^2] from 1 along the
        given unit directions. Plain maximum likelihood leaves small
        covariance residue that this term cleans up; being a population-level
        statistic, it cannot memorize individual samples.
        """
        x = np.atleast_2d(x)
        ys = np.asarray(ys, dtype=np.int64)
        self._check_ready(ys)
        n = x.shape[0]
        z, scales = self.forward_parts(Tensor(x), Tensor(_onehot(ys, self.n_datasets)))
        loss = scale(sum_all(mul(z, z)), 0.5 / n)
        for s in scales:
            loss = add(loss, scale(sum_all(s), -1.0 / n))
        for block in self.blocks:
            loss = add(loss, scale(sum_all(block.log_scale), -1.0))
        loss = add(loss, Tensor(0.5 * self.d * LOG_2PI))
        if moment_weight > 0.0:
            loss = add(loss, scale(self.moment_penalty_t(x, ys, directions), moment_weight))
        return loss

    def moment_penalty_t(self, x: np.ndarray, ys: np.ndarray, directions: np.ndarray | None) -> Tensor:
        """Squared batch mean of z plus squared deviations of E[(u^T z)^2] from 1
        along the given unit directions; graph-building."""
        x = np.atleast_2d(x)
        ys = np.asarray(ys, dtype=np.int64)
        n = x.shape[0]
        z, _ = self.forward_parts(Tensor(x), Tensor(_onehot(ys, self.n_datasets)))
        mean = scale(matmul(Tensor(np.ones((1, n))), z), 1.0 / n)
        penalty = sum_all(mul(mean, mean))
        if directions is not None:
            proj = matmul(z, Tensor(directions))  # (n, k)
            for k in range(directions.shape[1]):
                col = slice_cols(proj, k, k + 1)
                dev = add(scale(sum_all(mul(col, col)), 1.0 / n), Tensor(-1.0))
                penalty = add(penalty, mul(dev, dev))
        return penalty

    def actnorm_data_init(self, x: np.ndarray, ys: np.ndarray) -> None:
        """Set each block's ActNorm so its first-batch output is zero mean, unit
        variance per dimension. One-shot; a second call is an error."""
        if any(b.initialized for b in self.blocks):
            raise ActNormStateError("ActNorm already initialized")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ys = np.asarray(ys, dtype=np.int64)
        if ys.size and (ys.min() < 0 or ys.max() >= self.n_datasets):
            raise UnknownDatasetError(f"label out of range 0..{self.n_datasets - 1}")
        emb = Tensor(self.embedding.data[ys])
        cur = x
        for block in self.blocks:
            mean = cur.mean(axis=0)
            std = cur.std(axis=0)
            if np.any(std <= 0):
                raise DegenerateDataError("zero-variance dimension in ActNorm init batch")
            block.bias.data[:] = mean
            block.log_scale.data[:] = -np.log(std)
            block.initialized = True
            out, _ = block.forward_t(Tensor(cur), emb)
            cur = out.data


def _onehot(ys: np.ndarray, n: int) -> np.ndarray:
    oh = np.zeros((ys.shape[0], n))
    oh[np.arange(ys.shape[0]), ys] = 1.0
    return oh
