"""Complex noise families: sampling, densities and the binary noise file.

Families
--------
``gaussian``          circular complex Gaussian, ``sigma`` is the std per real dimension.
``sas``               symmetric alpha-stable, independent real and imaginary parts,
                      characteristic function ``exp(-(sigma*|t|)**alpha)`` per part.
``gaussian_mixture``  each complex *vector* draws one component ``CN(mean*1, var*I)``.
``nakagami``          amplitude ~ Nakagami(m, omega), phase uniform on [0, 2*pi).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import integrate, special

from . import rng

FAMILIES = ("gaussian", "sas", "gaussian_mixture", "nakagami")


class NoiseParameterError(ValueError):
    pass


class UnsupportedDensityError(ValueError):
    pass


class QuadratureError(ArithmeticError):
    pass


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mean: complex
    var: float  # E|w - mean|^2 per complex element


# CN(-1, 2) and CN(1, 1) mixed equally.
DEFAULT_MIXTURE = (MixtureComponent(0.5, -1.0 + 0j, 2.0), MixtureComponent(0.5, 1.0 + 0j, 1.0))


@dataclass(frozen=True)
class NoiseSpec:
    family: str
    alpha: float = 2.0
    sigma: float = 1.0
    mixture: tuple[MixtureComponent, ...] = field(default=DEFAULT_MIXTURE)
    m: float = 2.0
    omega: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise NoiseParameterError(f"unknown noise family {self.family!r}")
        if self.family in ("gaussian", "sas") and not self.sigma >= 0.0:
            raise NoiseParameterError(f"sigma must be >= 0, got {self.sigma}")
        if self.family == "sas" and not 0.0 < self.alpha <= 2.0:
            raise NoiseParameterError(f"alpha must lie in (0, 2], got {self.alpha}")
        if self.family == "gaussian_mixture":
            if not self.mixture:
                raise NoiseParameterError("mixture needs at least one component")
            weights = [c.weight for c in self.mixture]
            if min(weights) < 0 or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
                raise NoiseParameterError(f"mixture weights must be >= 0 and sum to 1: {weights}")
            if min(c.var for c in self.mixture) < 0:
                raise NoiseParameterError("mixture variances must be >= 0")
        if self.family == "nakagami":
            if self.m < 0.5:
                raise NoiseParameterError(f"Nakagami m must be >= 0.5, got {self.m}")
            if self.omega < 0:
                raise NoiseParameterError(f"Nakagami omega must be >= 0, got {self.omega}")

    @property
    def nominal_power(self) -> float:
        """Nominal per-complex-element power; for SaS this is 2*sigma**2 by convention."""
        if self.family in ("gaussian", "sas"):
            return 2.0 * self.sigma**2
        if self.family == "nakagami":
            return self.omega
        return sum(c.weight * (abs(c.mean) ** 2 + c.var) for c in self.mixture)

    def scaled(self, c: float) -> "NoiseSpec":
        """Spec of ``c * w`` for ``w`` drawn from this spec."""
        if c < 0:
            raise NoiseParameterError("scale factor must be >= 0")
        if self.family in ("gaussian", "sas"):
            return replace(self, sigma=self.sigma * c)
        if self.family == "nakagami":
            return replace(self, omega=self.omega * c * c)
        comps = tuple(MixtureComponent(k.weight, k.mean * c, k.var * c * c) for k in self.mixture)
        return replace(self, mixture=comps)

    def at_sigma(self, sigma: float) -> "NoiseSpec":
        """Rescale so the nominal power equals ``2*sigma**2``.

        Gaussian and SaS take ``sigma`` directly as their scale; the
        finite-power families are rescaled as a whole.
        """
        if self.family in ("gaussian", "sas"):
            return replace(self, sigma=sigma)
        p0 = self.nominal_power
        if p0 <= 0:
            raise NoiseParameterError("cannot rescale a zero-power spec")
        return self.scaled(math.sqrt(2.0 * sigma**2 / p0))

    def describe(self) -> dict:
        d = {"family": self.family}
        if self.family in ("gaussian", "sas"):
            d["sigma"] = self.sigma
        if self.family == "sas":
            d["alpha"] = self.alpha
        if self.family == "nakagami":
            d.update(m=self.m, omega=self.omega)
        if self.family == "gaussian_mixture":
            d["mixture"] = [
                [c.weight, c.mean.real, c.mean.imag, c.var] for c in self.mixture
            ]
        return d

    @classmethod
    def from_description(cls, d: dict) -> "NoiseSpec":
        d = dict(d)
        if "mixture" in d:
            d["mixture"] = tuple(
                MixtureComponent(w, complex(re, im), v) for w, re, im, v in d["mixture"]
            )
        return cls(**d)


@dataclass
class NoiseBatch:
    count: int
    dim: int
    samples: np.ndarray  # (count, dim) complex128
    spec: NoiseSpec
    seed: int


def stable_cms(alpha: float, size, gen: np.random.Generator) -> np.ndarray:
    """Standard symmetric stable variates, characteristic function exp(-|t|**alpha).

    Chambers-Mallows-Stuck with zero skew.
    """
    v = gen.uniform(-0.5 * np.pi, 0.5 * np.pi, size)
    w = gen.standard_exponential(size)
    if alpha == 1.0:
        return np.tan(v)
    if alpha == 2.0:
        return 2.0 * np.sqrt(w) * np.sin(v)
    return (
        np.sin(alpha * v)
        / np.cos(v) ** (1.0 / alpha)
        * (np.cos((1.0 - alpha) * v) / w) ** ((1.0 - alpha) / alpha)
    )


def draw_noise(spec: NoiseSpec, shape: tuple[int, int], gen: np.random.Generator) -> np.ndarray:
    """Complex noise array of ``shape = (count, dim)`` from an existing generator."""
    count, dim = shape
    fam = spec.family
    if fam == "gaussian":
        z = gen.standard_normal((count, dim, 2))
        out = spec.sigma * (z[..., 0] + 1j * z[..., 1])
    elif fam == "sas":
        z = stable_cms(spec.alpha, (count, dim, 2), gen)
        out = spec.sigma * (z[..., 0] + 1j * z[..., 1])
    elif fam == "gaussian_mixture":
        weights = np.array([c.weight for c in spec.mixture])
        comp = gen.choice(len(weights), size=count, p=weights)
        means = np.array([c.mean for c in spec.mixture])[comp][:, None]
        std = np.sqrt(np.array([c.var for c in spec.mixture]) / 2.0)[comp][:, None]
        z = gen.standard_normal((count, dim, 2))
        out = means + std * (z[..., 0] + 1j * z[..., 1])
    else:
        r = np.sqrt(gen.gamma(spec.m, spec.omega / spec.m, (count, dim)))
        phase = gen.uniform(0.0, 2.0 * np.pi, (count, dim))
        out = r * np.exp(1j * phase)
    return np.ascontiguousarray(out, dtype=np.complex128)


def sample_noise(spec: NoiseSpec, count: int, dim: int, seed: int) -> NoiseBatch:
    if count < 1 or dim < 1:
        raise NoiseParameterError(f"count and dim must be >= 1, got {count}, {dim}")
    gen = rng.stream(seed, rng.NOISE)
    return NoiseBatch(count, dim, draw_noise(spec, (count, dim), gen), spec, seed)


def join_complex(re, im) -> np.ndarray:
    """Complex array from real and imaginary parts, bit-exact (keeps signed zeros)."""
    re, im = np.asarray(re, dtype=np.float64), np.asarray(im, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(re.shape, im.shape), dtype=np.complex128)
    out.real = re
    out.imag = im
    return out


def _gauss_real(x: np.ndarray, var: float) -> np.ndarray:
    return -0.5 * np.log(2.0 * np.pi * var) - x * x / (2.0 * var)


def log_pdf_analytic(spec: NoiseSpec, w) -> np.ndarray | float:
    """Exact log-density of the complex vector(s) ``w`` (last axis = elements)."""
    w = np.asarray(w, dtype=np.complex128)
    if w.ndim == 0:
        w = w[None]
    fam = spec.family
    if fam == "gaussian" or (fam == "sas" and spec.alpha == 2.0):
        var = spec.sigma**2 if fam == "gaussian" else 2.0 * spec.sigma**2
        per = _gauss_real(w.real, var) + _gauss_real(w.imag, var)
        out = per.sum(axis=-1)
    elif fam == "sas" and spec.alpha == 1.0:
        s = spec.sigma
        per = 2.0 * np.log(s / np.pi) - np.log(s * s + w.real**2) - np.log(s * s + w.imag**2)
        out = per.sum(axis=-1)
    elif fam == "sas":
        raise UnsupportedDensityError(f"no closed-form SaS density at alpha={spec.alpha}")
    elif fam == "gaussian_mixture":
        terms = []
        for c in spec.mixture:
            d2 = np.abs(w - c.mean) ** 2
            ll = (-np.log(np.pi * c.var) - d2 / c.var).sum(axis=-1)
            terms.append(np.log(c.weight) + ll)
        out = special.logsumexp(np.stack(terms), axis=0)
    else:
        m, om = spec.m, spec.omega
        r = np.abs(w)
        const = m * np.log(m) - special.gammaln(m) - np.log(np.pi) - m * np.log(om)
        with np.errstate(divide="ignore"):
            logr = np.log(r)
        radial = np.where(r == 0.0, 0.0 if m == 1.0 else -np.inf, (2.0 * m - 2.0) * logr)
        out = (const + radial - m * r * r / om).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def sas_pdf_numeric(
    alpha: float,
    sigma: float,
    w: float,
    *,
    tail_tol: float = 1e-17,
    epsabs: float = 1e-13,
    limit: int = 500,
) -> float:
    """Density of a real SaS variate by inverting its characteristic function.

    ``f(w) = (1/pi) * int_0^inf exp(-(sigma*t)**alpha) cos(t*w) dt``; the
    integral is truncated where the envelope drops below ``tail_tol``.
    """
    if not 0.0 < alpha <= 2.0:
        raise NoiseParameterError(f"alpha must lie in (0, 2], got {alpha}")
    if sigma <= 0.0:
        raise NoiseParameterError(f"sigma must be > 0, got {sigma}")
    t_max = (-math.log(tail_tol)) ** (1.0 / alpha) / sigma

    def envelope(t):
        return math.exp(-((sigma * t) ** alpha))

    w = float(w)
    kw = dict(epsabs=epsabs, epsrel=1e-10, limit=limit, full_output=1)
    if w == 0.0:
        res = integrate.quad(envelope, 0.0, t_max, **kw)
    else:
        res = integrate.quad(envelope, 0.0, t_max, weight="cos", wvar=w, **kw)
    val, err = res[0], res[1]
    # a fourth element (message) is only returned when QUADPACK flags a problem
    if len(res) > 3 or not math.isfinite(val) or err > 1e-8 * max(1.0, abs(val)):
        raise QuadratureError(
            f"quadrature did not converge: alpha={alpha} sigma={sigma} w={w} "
            f"value={val} abserr={err} t_max={t_max} detail={res[3] if len(res) > 3 else ''}"
        )
    pdf = val / math.pi
    if pdf <= 0.0:
        raise QuadratureError(f"non-positive density {pdf} at w={w}; tail beyond numerical range")
    return pdf


# --- binary noise file -----------------------------------------------------

NOISE_MAGIC = b"NFNOISE\x00"
NOISE_VERSION = 1
_NOISE_HEADER = struct.Struct("<8sIIQQ")  # magic, version, flags, count, dim -> 32 bytes


class NoiseFileError(ValueError):
    pass


def write_noise_file(path, samples: np.ndarray) -> None:
    samples = np.asarray(samples, dtype=np.complex128)
    count, dim = samples.shape
    inter = np.empty((count, dim, 2), dtype="<f8")
    inter[..., 0] = samples.real
    inter[..., 1] = samples.imag
    with open(path, "wb") as fh:
        fh.write(_NOISE_HEADER.pack(NOISE_MAGIC, NOISE_VERSION, 0, count, dim))
        fh.write(inter.tobytes())


def read_noise_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _NOISE_HEADER.size:
        raise NoiseFileError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, _flags, count, dim = _NOISE_HEADER.unpack_from(raw)
    if magic != NOISE_MAGIC:
        raise NoiseFileError(f"{path}: bad magic {magic!r}")
    if version != NOISE_VERSION:
        raise NoiseFileError(f"{path}: unsupported version {version}")
    need = _NOISE_HEADER.size + count * dim * 16
    if len(raw) != need:
        raise NoiseFileError(f"{path}: expected {need} bytes, found {len(raw)}")
    inter = np.frombuffer(raw, dtype="<f8", offset=_NOISE_HEADER.size).reshape(count, dim, 2)
    return join_complex(inter[..., 0], inter[..., 1])
