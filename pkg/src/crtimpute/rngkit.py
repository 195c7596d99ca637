"""Keyed random streams and the distribution samplers used by the pipeline.

A stream is a pure function of ``(master_seed, scenario_index,
replicate_index, stage_tag)``: the four values are folded into a
:class:`numpy.random.SeedSequence` that keys a counter-based Philox
generator.  No stream is ever split sequentially from another, so the order
in which replicates are processed (or how many workers process them) cannot
change any draw.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

_EIG_CLIP = 1e-10


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by seed, indices and a stage label."""

    master_seed: int
    scenario_index: int
    replicate_index: int
    stage_tag: str
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        seq = np.random.SeedSequence(
            entropy=int(self.master_seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(
                int(self.scenario_index),
                int(self.replicate_index),
                _tag_key(self.stage_tag),
            ),
        )
        object.__setattr__(self, "generator", np.random.Generator(np.random.Philox(seq)))

    def spawn(self, label: str) -> "RngStream":
        """Return the sub-stream ``stage_tag/label``; independent of this stream's state."""
        return RngStream(
            self.master_seed,
            self.scenario_index,
            self.replicate_index,
            f"{self.stage_tag}/{label}",
        )

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def standard_normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)


def make_stream(master_seed: int, scenario_index: int, replicate_index: int, stage_tag: str) -> RngStream:
    return RngStream(master_seed, scenario_index, replicate_index, stage_tag)


def as_generator(stream) -> np.random.Generator:
    """Accept an :class:`RngStream`, a numpy ``Generator`` or an integer seed."""
    if isinstance(stream, RngStream):
        return stream.generator
    if isinstance(stream, np.random.Generator):
        return stream
    return np.random.default_rng(stream)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise ValueError("invalid covariance: not square")
    scale = max(1.0, float(np.max(np.abs(cov))))
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10 * scale):
        raise ValueError("invalid covariance: not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if np.any(vals < -_EIG_CLIP * scale):
        raise ValueError("invalid covariance: not positive semi-definite")
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def draw_mvn(mean, cov, stream, size: int | None = None) -> np.ndarray:
    """Multivariate normal draw(s) via an eigen factorisation of ``cov``.

    Eigenvalues in ``[-1e-10, 0)`` (relative to the matrix scale) are clipped
    to zero, so degenerate covariances are allowed; anything more negative
    raises ``ValueError("invalid covariance ...")``.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    factor = _psd_factor(cov)
    if factor.shape[0] != mean.shape[0]:
        raise ValueError("invalid covariance: dimension mismatch with mean")
    gen = as_generator(stream)
    shape = (mean.shape[0],) if size is None else (size, mean.shape[0])
    z = gen.standard_normal(shape)
    return mean + z @ factor.T


def draw_inverse_wishart(df: float, scale, stream, size: int | None = None) -> np.ndarray:
    """Inverse-Wishart draw(s), parameterised so that ``E[X] = scale / (df - p - 1)``.

    Sampled by inverting a Bartlett-decomposition Wishart draw with
    ``df`` degrees of freedom and scale matrix ``inv(scale)``.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    p = scale.shape[0]
    if not df > p - 1:
        raise ValueError("improper inverse-Wishart: df must exceed p - 1")
    try:
        chol_inv = np.linalg.cholesky(np.linalg.inv(scale))
    except np.linalg.LinAlgError as exc:
        raise ValueError("inverse-Wishart scale must be positive definite") from exc
    gen = as_generator(stream)
    n = 1 if size is None else size
    a = np.zeros((n, p, p))
    idx = np.arange(p)
    a[:, idx, idx] = np.sqrt(gen.chisquare(df - idx, size=(n, p)))
    lower = np.tril_indices(p, -1)
    a[:, lower[0], lower[1]] = gen.standard_normal((n, len(lower[0])))
    la = chol_inv @ a
    wishart = la @ np.swapaxes(la, -1, -2)
    out = np.linalg.inv(wishart)
    out = 0.5 * (out + np.swapaxes(out, -1, -2))
    return out[0] if size is None else out


def draw_scaled_inv_chisq(df: float, scale: float, stream, size: int | None = None):
    """Scaled inverse chi-square: returns ``df * scale / chi2(df)``.

    The mean is ``df * scale / (df - 2)`` for ``df > 2``.
    """
    if not (df > 0 and scale > 0):
        raise ValueError("scaled inverse chi-square needs df > 0 and scale > 0")
    gen = as_generator(stream)
    return df * scale / gen.chisquare(df, size=size)


def draw_gamma(shape: float, scale: float, stream, size: int | None = None):
    if not (shape > 0 and scale > 0):
        raise ValueError("gamma needs shape > 0 and scale > 0")
    return as_generator(stream).gamma(shape, scale, size=size)
