"""QPSK over i.i.d. Rayleigh flat fading, real-valued decomposition and frames.

Bit mapping (Gray, unit energy)::

    bits b0 b1  ->  ((1 - 2*b0) + 1j*(1 - 2*b1)) / sqrt(2)
    index = 2*b0 + b1:  0 -> (+1+1j)/√2, 1 -> (+1-1j)/√2, 2 -> (-1+1j)/√2, 3 -> (-1-1j)/√2

so the bit errors of a symbol decision are ``popcount(index_hat ^ index)``.

SNR convention: ``SNR = E||Hx||^2 / (M * 2*sigma**2) = N / (2*sigma**2)`` for
unit-energy symbols and unit-variance channel taps. ``sigma`` is the
per-real-dimension std for Gaussian noise and the scale of SaS noise.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .noise import NoiseSpec, draw_noise, join_complex

SQRT_HALF = 1.0 / math.sqrt(2.0)
QPSK = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j], dtype=np.complex128) * SQRT_HALF
BITS_PER_SYMBOL = 2
CANDIDATE_CAP = 2**20
# frames are generated in fixed blocks; each block has its own random streams
FRAME_BLOCK = 256

_POPCOUNT = np.array([bin(i).count("1") for i in range(4)])


class CandidateCapError(ValueError):
    pass


def qpsk_modulate(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    if bits.size % 2:
        raise ValueError(f"QPSK needs an even number of bits, got {bits.size}")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    return QPSK[2 * bits[0::2] + bits[1::2]]


def qpsk_slice(symbols) -> np.ndarray:
    """Nearest-constellation index for each (possibly noisy) symbol."""
    s = np.asarray(symbols)
    return 2 * (s.real < 0) + (s.imag < 0)


def qpsk_demap(symbols) -> np.ndarray:
    idx = qpsk_slice(symbols).reshape(-1)
    return np.stack([idx >> 1, idx & 1], axis=1).reshape(-1)


def bit_errors(idx_hat, idx_true) -> int:
    return int(_POPCOUNT[np.bitwise_xor(np.asarray(idx_hat), np.asarray(idx_true))].sum())


@dataclass(frozen=True)
class MimoScenario:
    n_tx: int
    n_rx: int
    snr_db: float
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec("gaussian"))
    seed: int = 0
    point: int = 0  # sweep point index, part of the stream key
    constellation_order: int = 4

    def __post_init__(self):
        if self.n_tx < 1 or self.n_rx < 1:
            raise ValueError("antenna counts must be >= 1")
        if self.constellation_order != 4:
            raise ValueError("only QPSK (P=4) is supported")

    @property
    def sigma(self) -> float:
        return sigma_for_snr(self)

    @property
    def point_noise(self) -> NoiseSpec:
        return self.noise.at_sigma(self.sigma)


def sigma_for_snr(scenario: MimoScenario) -> float:
    """Noise scale for the scenario's SNR; ``inf`` dB gives 0 (noiseless)."""
    if math.isinf(scenario.snr_db) and scenario.snr_db > 0:
        return 0.0
    snr = 10.0 ** (scenario.snr_db / 10.0)
    return math.sqrt(scenario.n_tx / (2.0 * snr))


def realify_matrix(h: np.ndarray) -> np.ndarray:
    """``[[Re H, -Im H], [Im H, Re H]]`` over the last two axes."""
    h = np.asarray(h)
    top = np.concatenate([h.real, -h.imag], axis=-1)
    bot = np.concatenate([h.imag, h.real], axis=-1)
    return np.concatenate([top, bot], axis=-2)


def realify_vector(v: np.ndarray) -> np.ndarray:
    """``[Re v; Im v]`` over the last axis."""
    v = np.asarray(v)
    return np.concatenate([v.real, v.imag], axis=-1)


def complexify_vector(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    n = v.shape[-1] // 2
    return join_complex(v[..., :n], v[..., n:])


def realify(h: np.ndarray, *vectors: np.ndarray):
    """Real forms of a channel matrix and any number of vectors."""
    out = [realify_matrix(h)] + [realify_vector(v) for v in vectors]
    return out[0] if len(out) == 1 else tuple(out)


@dataclass
class Frame:
    H: np.ndarray  # (M, N) complex
    x: np.ndarray  # (N,) complex
    w: np.ndarray  # (M,)
    y: np.ndarray  # (M,)
    symbols: np.ndarray | None = None  # (N,) constellation indices

    @property
    def realified(self) -> "RealizedFrame":
        return RealizedFrame(*realify(self.H, self.x, self.y, self.w))


@dataclass
class RealizedFrame:
    H_bar: np.ndarray
    x_bar: np.ndarray
    y_bar: np.ndarray
    w_bar: np.ndarray


@dataclass
class FrameBatch:
    H: np.ndarray  # (F, M, N)
    symbols: np.ndarray  # (F, N) int
    w: np.ndarray  # (F, M)
    y: np.ndarray  # (F, M)

    @property
    def x(self) -> np.ndarray:
        return QPSK[self.symbols]

    def __len__(self) -> int:
        return self.H.shape[0]

    def frame(self, i: int) -> Frame:
        return Frame(self.H[i], QPSK[self.symbols[i]], self.w[i], self.y[i], self.symbols[i])

    def slice(self, lo: int, hi: int) -> "FrameBatch":
        return FrameBatch(self.H[lo:hi], self.symbols[lo:hi], self.w[lo:hi], self.y[lo:hi])

    @classmethod
    def concat(cls, batches) -> "FrameBatch":
        batches = list(batches)
        return cls(*(np.concatenate([getattr(b, k) for b in batches]) for k in ("H", "symbols", "w", "y")))


def _channel_block(scenario: MimoScenario, block: int) -> np.ndarray:
    gen = rng.stream(scenario.seed, rng.CHANNEL, scenario.point, block)
    z = gen.standard_normal((FRAME_BLOCK, scenario.n_rx, scenario.n_tx, 2))
    return (z[..., 0] + 1j * z[..., 1]) * SQRT_HALF


def _frame_block(scenario: MimoScenario, block: int) -> FrameBatch:
    M, N = scenario.n_rx, scenario.n_tx
    H = _channel_block(scenario, block)
    sym = rng.stream(scenario.seed, rng.SYMBOLS, scenario.point, block).integers(0, 4, (FRAME_BLOCK, N))
    sigma = sigma_for_snr(scenario)
    if sigma == 0.0:
        w = np.zeros((FRAME_BLOCK, M), dtype=np.complex128)
    else:
        gen = rng.stream(scenario.seed, rng.FRAME_NOISE, scenario.point, block)
        w = draw_noise(scenario.noise.at_sigma(sigma), (FRAME_BLOCK, M), gen)
    hx = np.einsum("fmn,fn->fm", H, QPSK[sym])
    y = hx + w
    # store the noise as y - Hx so the linear model holds bit-exactly
    return FrameBatch(H, sym, y - hx, y)


def gen_channel(scenario: MimoScenario, frame_index: int) -> np.ndarray:
    """Channel matrix of one frame; i.i.d. CN(0, 1) taps, pure in (seed, point, index)."""
    block, off = divmod(frame_index, FRAME_BLOCK)
    return _channel_block(scenario, block)[off]


def gen_frames(scenario: MimoScenario, count: int, start: int = 0) -> FrameBatch:
    """Frames ``start .. start+count-1`` of the scenario.

    Frame ``i`` is the same regardless of ``start``/``count``, so any
    partition of the index range reproduces the same frames.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    first, last = start // FRAME_BLOCK, (start + count - 1) // FRAME_BLOCK
    full = FrameBatch.concat(_frame_block(scenario, b) for b in range(first, last + 1))
    lo = start - first * FRAME_BLOCK
    return full.slice(lo, lo + count)


def all_candidates(n_tx: int, order: int = 4, cap: int = CANDIDATE_CAP) -> np.ndarray:
    """Every constellation index vector, lexicographic (antenna 0 most significant)."""
    total = order**n_tx
    if total > cap:
        raise CandidateCapError(
            f"{order}^{n_tx} = {total} candidates exceeds the cap of {cap}; "
            "use a neighborhood detector (ggamp_manfe / ggamp_emle) instead"
        )
    idx = np.indices((order,) * n_tx).reshape(n_tx, -1).T
    return np.ascontiguousarray(idx)


# --- binary frame file -----------------------------------------------------

FRAME_MAGIC = b"NFFRAME\x00"
FRAME_VERSION = 1
_FRAME_HEADER = struct.Struct("<8sIIIIQ")  # magic, version, M, N, reserved, count -> 32 bytes


class FrameFileError(ValueError):
    pass


def write_frame_file(path, frames: FrameBatch) -> None:
    F, M, N = frames.H.shape
    with open(path, "wb") as fh:
        fh.write(_FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, M, N, 0, F))
        for i in range(F):
            for arr in (frames.H[i].reshape(-1), frames.x[i], frames.w[i], frames.y[i]):
                inter = np.empty((arr.size, 2), dtype="<f8")
                inter[:, 0] = arr.real
                inter[:, 1] = arr.imag
                fh.write(inter.tobytes())


def read_frame_file(path) -> list[Frame]:
    raw = Path(path).read_bytes()
    if len(raw) < _FRAME_HEADER.size:
        raise FrameFileError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, M, N, _, count = _FRAME_HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC:
        raise FrameFileError(f"{path}: bad magic {magic!r}")
    if version != FRAME_VERSION:
        raise FrameFileError(f"{path}: unsupported version {version}")
    per = (M * N + N + 2 * M) * 16
    if len(raw) != _FRAME_HEADER.size + count * per:
        raise FrameFileError(f"{path}: expected {_FRAME_HEADER.size + count * per} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", offset=_FRAME_HEADER.size).reshape(count, -1, 2)
    cplx = join_complex(vals[..., 0], vals[..., 1])
    frames = []
    for row in cplx:
        H = row[: M * N].reshape(M, N)
        x = row[M * N : M * N + N]
        w = row[M * N + N : M * N + N + M]
        y = row[M * N + N + M :]
        frames.append(Frame(H, x, w, y, qpsk_slice(x)))
    return frames
