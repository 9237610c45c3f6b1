"""Shared autoencoder over the union of all datasets.

One encoder/decoder pair is trained on every dataset combined; its code is
the representation the conditional flow operates on. Encode and decode are
pure given a trained model. Decoder output passes through a squashing
nonlinearity, so pixels stay in [0, 1] for any finite code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, ShapeError
from .nn import Dense, Mlp, squash01
from .rng import RngStream
from .tensor import Tensor

PIXEL_DIM = 768  # 16 x 16 x 3


class AEModel:
    def __init__(self, encoder: Mlp, decoder: Mlp, d: int, h: int):
        self.encoder = encoder
        self.decoder = decoder
        self.d = d
        self.h = h

    @classmethod
    def create(cls, rng: RngStream, d: int = 16, h: int = 128) -> "AEModel":
        enc = Mlp.init([PIXEL_DIM, h, d], rng.split("enc"))
        dec = Mlp.init([d, h, PIXEL_DIM], rng.split("dec"))
        return cls(enc, dec, d, h)

    @classmethod
    def zeros(cls, d: int = 16, h: int = 128) -> "AEModel":
        enc = Mlp([Dense.zeros(PIXEL_DIM, h), Dense.zeros(h, d)])
        dec = Mlp([Dense.zeros(d, h), Dense.zeros(h, PIXEL_DIM)])
        return cls(enc, dec, d, h)

    def params(self) -> list[Tensor]:
        return self.encoder.params() + self.decoder.params()

    def encode_t(self, pixels: Tensor) -> Tensor:
        if pixels.shape[-1] != PIXEL_DIM:
            raise ShapeError(f"expected trailing dim {PIXEL_DIM}, got {pixels.shape}")
        return self.encoder(pixels)

    def decode_t(self, code: Tensor) -> Tensor:
        if code.shape[-1] != self.d:
            raise ShapeError(f"expected trailing dim {self.d}, got {code.shape}")
        return squash01(self.decoder(code))

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        """Pixels (n, 768) or (768,) in [0,1] to codes, outside any graph."""
        return self.encode_t(Tensor(np.atleast_2d(pixels))).data

    def decode(self, code: np.ndarray) -> np.ndarray:
        """Codes (n, d) or (d,) to pixels in [0, 1]."""
        return self.decode_t(Tensor(np.atleast_2d(code))).data


@dataclass
class RepStats:
    """Per-dimension standardization of representations, fit on the train union."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, codes: np.ndarray) -> "RepStats":
        mean = codes.mean(axis=0)
        std = codes.std(axis=0)
        if np.any(std <= 0):
            raise DegenerateDataError("representation has a zero-variance dimension")
        return cls(mean, std)

    def standardize(self, codes: np.ndarray) -> np.ndarray:
        return (codes - self.mean) / self.std

    def destandardize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean
