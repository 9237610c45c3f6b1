"""Projection of inputs across datasets, per-dataset sampling, round-trips.

All three operations are pure functions over an immutable checkpoint, so
concurrent callers (the HTTP service in particular) need no locking. The
core identity: inferring a content code with the source label and inverting
it with the target label renders the same content under the target
dataset's bias; with target == source this reduces exactly to the plain
autoencoder reconstruction at the representation level.
"""

from __future__ import annotations

import numpy as np

from .errors import BiasLensError, UnknownDatasetError
from .rng import RngStream
from .training import Checkpoint


class Pipeline:
    """Loaded checkpoint with convenience ops; immutable once constructed."""

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt
        self.ae = ckpt.ae
        self.stats = ckpt.stats
        self.flow = ckpt.flow
        self.registry = ckpt.registry
        self.config = ckpt.config
        self._by_name = {s.name: s.id for s in ckpt.registry}

    @property
    def n_datasets(self) -> int:
        return len(self.registry)

    def label(self, y: int | str) -> int:
        if isinstance(y, str):
            if y not in self._by_name:
                raise UnknownDatasetError(f"unknown dataset {y!r}; have {sorted(self._by_name)}")
            return self._by_name[y]
        y = int(y)
        if not (0 <= y < self.n_datasets):
            raise UnknownDatasetError(f"dataset id {y} out of range 0..{self.n_datasets - 1}")
        return y

    def _need_flow(self):
        if self.flow is None:
            raise BiasLensError("checkpoint has no flow model; run flow training first")
        return self.flow

    def encode_std(self, pixels: np.ndarray) -> np.ndarray:
        """Standardized representation x of raw pixels."""
        return self.stats.standardize(self.ae.encode(pixels))

    def decode_destd(self, x: np.ndarray) -> np.ndarray:
        return self.ae.decode(self.stats.destandardize(x))

    def content_codes(self, pixels: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """z = tau(x|y) for a batch of observations with known labels."""
        flow = self._need_flow()
        z, _ = flow.forward(self.encode_std(pixels), np.asarray(ys))
        return z

    def reconstruct(self, pixels: np.ndarray) -> np.ndarray:
        """Plain autoencoder reconstruction (no flow involved)."""
        return self.ae.decode(self.ae.encode(pixels))

    def project(self, pixels: np.ndarray, y_src: int | str, y_tgt: int | str) -> np.ndarray:
        """Render the content of `pixels` (from dataset y_src) under y_tgt."""
        flow = self._need_flow()
        src, tgt = self.label(y_src), self.label(y_tgt)
        pixels = np.atleast_2d(pixels)
        n = pixels.shape[0]
        x = self.encode_std(pixels)
        z, _ = flow.forward(x, np.full(n, src))
        x_tgt = flow.inverse(z, np.full(n, tgt))
        return self.decode_destd(x_tgt)

    def sample(self, y: int | str, n: int, seed: int) -> np.ndarray:
        """Draw codes from the prior and render them under dataset y. The codes
        depend only on (seed, n), so the same seed across different y shows the
        same content under each dataset's bias."""
        if n < 1:
            raise BiasLensError("sample count must be at least 1")
        flow = self._need_flow()
        tgt = self.label(y)
        z = RngStream(seed, "sample").normal(size=(n, flow.d))
        x = flow.inverse(z, np.full(n, tgt))
        return self.decode_destd(x)

    def roundtrip(self, pixels: np.ndarray, y_src: int | str, y_tgt: int | str, latent: bool = True) -> np.ndarray:
        """Project src->tgt->src. With latent=True the intermediate hop skips the
        decoder/encoder, so the result equals the plain reconstruction up to
        float round-off; with latent=False it goes through pixels both ways."""
        flow = self._need_flow()
        src, tgt = self.label(y_src), self.label(y_tgt)
        if not latent:
            return self.project(self.project(pixels, src, tgt), tgt, src)
        pixels = np.atleast_2d(pixels)
        n = pixels.shape[0]
        x = self.encode_std(pixels)
        z, _ = flow.forward(x, np.full(n, src))
        x_tgt = flow.inverse(z, np.full(n, tgt))
        z_back, _ = flow.forward(x_tgt, np.full(n, tgt))
        x_back = flow.inverse(z_back, np.full(n, src))
        return self.decode_destd(x_back)
