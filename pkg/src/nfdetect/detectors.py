"""MIMO detectors: exhaustive and neighborhood ML search plus Gaussian GAMP.

All detectors work on batches of frames (``FrameBatch``) and return
constellation indices; the single-frame functions are thin wrappers.
Candidate ties are broken by the lowest candidate index.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np

from .channel import QPSK, CANDIDATE_CAP, Frame, FrameBatch, all_candidates, qpsk_slice, realify_matrix, realify_vector
from .flow.model import CompiledFlow, FlowParams
from .noise import NoiseSpec, UnsupportedDensityError, log_pdf_analytic

KINDS = ("e_mle", "manfe", "ggamp", "ggamp_manfe", "ggamp_emle", "oracle_mle")
GAMP_DAMPING = 0.7
GAMP_TOL = 1e-8
GAMP_VAR_FLOOR = 1e-10
FRAME_CHUNK = 256
_A = 1.0 / math.sqrt(2.0)


class DetectorConfigError(ValueError):
    pass


@dataclass
class DetectionResult:
    x_hat: np.ndarray
    symbols: np.ndarray
    score: float
    evaluations: int
    iterations_used: int = 0
    diverged: bool = False


@dataclass
class BatchDetection:
    symbols: np.ndarray  # (F, N)
    scores: np.ndarray  # (F,)
    evaluations: np.ndarray  # (F,)
    iterations: np.ndarray  # (F,)
    diverged: np.ndarray  # (F,) bool

    @property
    def x_hat(self) -> np.ndarray:
        return QPSK[self.symbols]


def neighborhood_size(n: int, e: int, order: int = 4) -> int:
    return sum(math.comb(n, i) * (order - 1) ** i for i in range(e + 1))


@lru_cache(maxsize=64)
def _neighborhood_pattern(n: int, e: int, order: int) -> np.ndarray:
    """``(C, n)`` table: -1 keeps the initial symbol, k >= 0 selects its k-th alternative."""
    rows = []
    for count in range(e + 1):
        for pos in combinations(range(n), count):
            for alts in np.ndindex(*(order - 1,) * count):
                row = np.full(n, -1)
                row[list(pos)] = alts
                rows.append(row)
    out = np.array(rows, dtype=np.int64).reshape(-1, n)
    out.setflags(write=False)
    return out


def neighborhood_batch(x0: np.ndarray, e: int, order: int = 4) -> np.ndarray:
    """Candidates within Hamming distance ``e`` of each row of ``x0``: ``(F, C, N)``."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.int64))
    n = x0.shape[1]
    if not 0 <= e <= n:
        raise DetectorConfigError(f"E must satisfy 0 <= E <= N={n}, got {e}")
    pat = _neighborhood_pattern(n, e, order)[None]  # (1, C, N)
    base = x0[:, None, :]
    alt = pat + (pat >= base)  # k-th symbol index other than the initial one
    return np.where(pat < 0, base, alt)


def neighborhood(x0, e: int, n: int | None = None, order: int = 4) -> np.ndarray:
    """Index vectors differing from ``x0`` in at most ``e`` positions.

    Ordered by error count, then error positions (lexicographic), then the
    replacement symbol indices. ``x0`` itself comes first.
    """
    x0 = np.asarray(x0, dtype=np.int64).reshape(-1)
    if n is not None and n != x0.size:
        raise DetectorConfigError(f"x0 has {x0.size} entries, expected N={n}")
    return neighborhood_batch(x0[None], e, order)[0]


# --- candidate scoring --------------------------------------------------------


def _residuals(frames: FrameBatch, cand: np.ndarray) -> np.ndarray:
    """``y - H x`` for candidates ``cand`` of shape ``(C, N)`` or ``(F, C, N)``."""
    xs = QPSK[cand]
    if xs.ndim == 2:
        hx = np.einsum("fmn,cn->fcm", frames.H, xs)
    else:
        hx = np.einsum("fmn,fcn->fcm", frames.H, xs)
    return frames.y[:, None, :] - hx


def _pick(scores: np.ndarray, cand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    best = np.argmax(scores, axis=1)  # first maximum wins ties
    rows = np.arange(scores.shape[0])
    sym = cand[best] if cand.ndim == 2 else cand[rows, best]
    return sym, scores[rows, best]


def _search(frames: FrameBatch, cand: np.ndarray, scorer) -> BatchDetection:
    syms, scores = [], []
    for lo in range(0, len(frames), FRAME_CHUNK):
        part = frames.slice(lo, lo + FRAME_CHUNK)
        c = cand if cand.ndim == 2 else cand[lo : lo + FRAME_CHUNK]
        s, sc = _pick(scorer(_residuals(part, c)), c)
        syms.append(s)
        scores.append(sc)
    f = len(frames)
    n_eval = cand.shape[-2]
    return BatchDetection(
        np.concatenate(syms), np.concatenate(scores), np.full(f, n_eval), np.zeros(f, int), np.zeros(f, bool)
    )


def euclidean_score(w: np.ndarray) -> np.ndarray:
    return -np.sum(w.real**2 + w.imag**2, axis=-1)


def _flow_scorer(flow) -> CompiledFlow:
    if isinstance(flow, CompiledFlow):
        return flow if flow.saturate else CompiledFlow(flow.params, saturate=True)
    if isinstance(flow, FlowParams):
        return CompiledFlow(flow, saturate=True)
    raise DetectorConfigError("MANFE detectors need a trained flow")


def _check_flow_dim(flow: CompiledFlow, frames: FrameBatch) -> None:
    if flow.config.dim != frames.y.shape[1]:
        raise DetectorConfigError(f"flow dim {flow.config.dim} does not match M={frames.y.shape[1]}")


def emle_batch(frames: FrameBatch, cap: int = CANDIDATE_CAP) -> BatchDetection:
    return _search(frames, all_candidates(frames.H.shape[2], cap=cap), euclidean_score)


def manfe_batch(frames: FrameBatch, flow, cap: int = CANDIDATE_CAP) -> BatchDetection:
    flow = _flow_scorer(flow)
    _check_flow_dim(flow, frames)
    return _search(frames, all_candidates(frames.H.shape[2], cap=cap), flow)


def oracle_scorer(spec: NoiseSpec):
    if spec.nominal_power == 0.0:
        # zero-scale limit: a point mass at the origin, so the smallest residual wins
        return euclidean_score
    try:
        log_pdf_analytic(spec, np.zeros(1, complex))
    except UnsupportedDensityError as exc:
        raise DetectorConfigError(str(exc)) from exc
    return lambda w: log_pdf_analytic(spec, w)


def oracle_batch(frames: FrameBatch, spec: NoiseSpec, cap: int = CANDIDATE_CAP) -> BatchDetection:
    return _search(frames, all_candidates(frames.H.shape[2], cap=cap), oracle_scorer(spec))


# --- G-GAMP -------------------------------------------------------------------


def ggamp_batch(frames: FrameBatch, T: int = 30, noise_var: float = 1.0) -> BatchDetection:
    """Sum-product GAMP on the real-valued model with a uniform {±1/√2} prior.

    ``noise_var`` is the complex noise variance assumed by the Gaussian
    output channel (``2*sigma**2``); each real dimension gets half of it. Frames whose messages go non-finite fall back to a
    matched-filter decision and are flagged in ``diverged``.
    """
    if T < 1:
        raise DetectorConfigError("GAMP needs T >= 1")
    A = realify_matrix(frames.H)  # (F, 2M, 2N)
    y = realify_vector(frames.y)
    f, _, n2 = A.shape
    A2 = A * A
    tw = max(0.5 * float(noise_var), GAMP_VAR_FLOOR)
    a2 = _A * _A
    xhat = np.zeros((f, n2))
    tx = np.full((f, n2), a2)
    shat = np.zeros_like(y)
    iters = np.zeros(f, dtype=np.int64)
    active = np.ones(f, dtype=bool)
    diverged = np.zeros(f, dtype=bool)
    with np.errstate(all="ignore"):
        for t in range(T):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            Ai, A2i = A[idx], A2[idx]
            xi, txi, si = xhat[idx], tx[idx], shat[idx]
            tp = np.einsum("fmn,fn->fm", A2i, txi)
            p = np.einsum("fmn,fn->fm", Ai, xi) - tp * si
            s_new = (y[idx] - p) / (tp + tw)
            ts = 1.0 / (tp + tw)
            si = s_new if t == 0 else GAMP_DAMPING * s_new + (1.0 - GAMP_DAMPING) * si
            tr = 1.0 / np.einsum("fmn,fm->fn", A2i, ts)
            r = xi + tr * np.einsum("fmn,fm->fn", Ai, si)
            x_new = _A * np.tanh(_A * r / tr)
            tx_new = a2 - x_new * x_new
            x_new = GAMP_DAMPING * x_new + (1.0 - GAMP_DAMPING) * xi
            tx_new = GAMP_DAMPING * tx_new + (1.0 - GAMP_DAMPING) * txi
            bad = ~(np.isfinite(x_new).all(1) & np.isfinite(tx_new).all(1) & np.isfinite(si).all(1))
            done = np.max(np.abs(x_new - xi), axis=1) < GAMP_TOL
            xhat[idx], tx[idx], shat[idx] = x_new, tx_new, si
            iters[idx] = t + 1
            diverged[idx[bad]] = True
            active[idx[bad | done]] = False
    n = n2 // 2
    syms = 2 * (xhat[:, :n] < 0) + (xhat[:, n:] < 0)
    if diverged.any():
        mf = np.einsum("fmn,fm->fn", frames.H[diverged].conj(), frames.y[diverged])
        syms[diverged] = qpsk_slice(mf)
    scores = euclidean_score(_residuals(frames, syms[:, None, :]))[:, 0]
    return BatchDetection(syms, scores, np.zeros(f, int), iters, diverged)


def _refine(frames: FrameBatch, init: BatchDetection, e: int, scorer) -> BatchDetection:
    cand = neighborhood_batch(init.symbols, e)
    out = _search(frames, cand, scorer)
    out.iterations = init.iterations
    out.diverged = init.diverged
    return out


def ggamp_manfe_batch(frames: FrameBatch, flow, T: int = 30, E: int = 1, noise_var: float = 1.0) -> BatchDetection:
    flow = _flow_scorer(flow)
    _check_flow_dim(flow, frames)
    return _refine(frames, ggamp_batch(frames, T, noise_var), E, flow)


def ggamp_emle_batch(frames: FrameBatch, T: int = 30, E: int = 1, noise_var: float = 1.0) -> BatchDetection:
    return _refine(frames, ggamp_batch(frames, T, noise_var), E, euclidean_score)


# --- single-frame API ----------------------------------------------------------


def _one(frame: Frame) -> FrameBatch:
    sym = frame.symbols if frame.symbols is not None else qpsk_slice(frame.x)
    return FrameBatch(frame.H[None], np.asarray(sym)[None], frame.w[None], frame.y[None])


def _result(b: BatchDetection) -> DetectionResult:
    return DetectionResult(
        QPSK[b.symbols[0]], b.symbols[0], float(b.scores[0]), int(b.evaluations[0]),
        int(b.iterations[0]), bool(b.diverged[0]),
    )


def emle_detect(frame: Frame) -> DetectionResult:
    return _result(emle_batch(_one(frame)))


def manfe_detect(frame: Frame, flow) -> DetectionResult:
    return _result(manfe_batch(_one(frame), flow))


def ggamp_detect(frame: Frame, T: int = 30, nominal_noise_var: float = 1.0) -> DetectionResult:
    return _result(ggamp_batch(_one(frame), T, nominal_noise_var))


def ggamp_manfe_detect(frame: Frame, flow, T: int = 30, E: int = 1, nominal_noise_var: float = 1.0) -> DetectionResult:
    return _result(ggamp_manfe_batch(_one(frame), flow, T, E, nominal_noise_var))


def ggamp_emle_detect(frame: Frame, T: int = 30, E: int = 1, nominal_noise_var: float = 1.0) -> DetectionResult:
    return _result(ggamp_emle_batch(_one(frame), T, E, nominal_noise_var))


def oracle_mle_detect(frame: Frame, noise_spec: NoiseSpec) -> DetectionResult:
    return _result(oracle_batch(_one(frame), noise_spec))


# --- configured detectors --------------------------------------------------------


_LABEL = re.compile(r"ggamp\((\d+)\)(?:_(manfe|emle)\((\d+)\))?")


@dataclass
class DetectorConfig:
    kind: str
    T: int = 30
    E: int = 1
    flow: object = None  # FlowParams / CompiledFlow, resolved by the caller
    noise_for_oracle: NoiseSpec | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DetectorConfigError(f"unknown detector kind {self.kind!r}; choose from {KINDS}")
        if self.T < 1:
            raise DetectorConfigError("T must be >= 1")
        if self.E < 0:
            raise DetectorConfigError("E must be >= 0")

    @property
    def needs_flow(self) -> bool:
        return self.kind in ("manfe", "ggamp_manfe")

    @property
    def label(self) -> str:
        if self.kind == "ggamp":
            return f"ggamp({self.T})"
        if self.kind == "ggamp_manfe":
            return f"ggamp({self.T})_manfe({self.E})"
        if self.kind == "ggamp_emle":
            return f"ggamp({self.T})_emle({self.E})"
        return self.kind

    @classmethod
    def from_label(cls, label: str) -> "DetectorConfig":
        """Parse ``e_mle``, ``manfe``, ``oracle_mle``, ``ggamp(30)``, ``ggamp(30)_manfe(2)``..."""
        m = _LABEL.fullmatch(label)
        if m:
            T = int(m.group(1))
            if m.group(2) is None:
                return cls("ggamp", T=T)
            return cls(f"ggamp_{m.group(2)}", T=T, E=int(m.group(3)))
        return cls(label)


def run_detector(cfg: DetectorConfig, frames: FrameBatch, noise_var: float) -> BatchDetection:
    """Run a configured detector; ``noise_var`` is the complex noise variance handed to GAMP."""
    n = frames.H.shape[2]
    if cfg.kind in ("ggamp_manfe", "ggamp_emle") and cfg.E > n:
        raise DetectorConfigError(f"E={cfg.E} exceeds N={n}")
    if cfg.needs_flow and cfg.flow is None:
        raise DetectorConfigError(f"{cfg.label} needs a trained flow")
    if cfg.kind == "e_mle":
        return emle_batch(frames)
    if cfg.kind == "manfe":
        return manfe_batch(frames, cfg.flow)
    if cfg.kind == "ggamp":
        return ggamp_batch(frames, cfg.T, noise_var)
    if cfg.kind == "ggamp_manfe":
        return ggamp_manfe_batch(frames, cfg.flow, cfg.T, cfg.E, noise_var)
    if cfg.kind == "ggamp_emle":
        return ggamp_emle_batch(frames, cfg.T, cfg.E, noise_var)
    if cfg.noise_for_oracle is None:
        raise DetectorConfigError("oracle_mle needs an analytic noise spec")
    return oracle_batch(frames, cfg.noise_for_oracle)
