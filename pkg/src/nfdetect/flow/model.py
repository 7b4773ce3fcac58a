"""Normalizing flow over squeezed complex noise vectors.

A batch of B complex M-vectors is carried as a ``(2M, B)`` matrix whose
columns are the ``M x 2`` squeeze layout flattened row-major
(``re_1, im_1, re_2, im_2, ...``). One flow step is

    actnorm -> invertible 1x1 conv -> coupling(lower | upper) -> coupling(upper | lower)

and the latent is a diagonal Gaussian with trainable mean and log-variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .. import rng
from ..autodiff import Node
from ..noise import join_complex

LOG_2PI = math.log(2.0 * math.pi)
ACTNORM_STD_FLOOR = 1e-6
DET_FLOOR = 1e-8
EVAL_CHUNK = 1 << 14


class FlowNumericError(FloatingPointError):
    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    dim: int
    k_steps: int = 4
    partition_m: int | None = None
    hidden_width: int = 8
    mlp_depth: int = 3
    # coupling log-scales are squashed to (-c, c) by c*tanh(raw/c); None keeps them raw
    scale_clamp: float | None = 3.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.k_steps < 1:
            raise ValueError("k_steps must be >= 1")
        if self.mlp_depth < 1 or self.hidden_width < 1:
            raise ValueError("MLP depth and width must be >= 1")
        if self.scale_clamp is not None and not self.scale_clamp > 0:
            raise ValueError("scale_clamp must be positive or None")
        if self.partition_m is None:
            object.__setattr__(self, "partition_m", self.dim // 2)
        if self.dim > 1:
            m = self.partition
            if not 1 <= m < self.dim:
                raise ValueError(f"partition_m must satisfy 1 <= m < {self.dim}, got {m}")

    @property
    def partition(self) -> int:
        return self.partition_m

    @property
    def split_row(self) -> int:
        """Row index separating the upper and lower halves of the (2M, B) layout.

        With a single complex dimension there is no position axis to split,
        so the couplings split the real part from the imaginary part.
        """
        return 1 if self.dim == 1 else 2 * self.partition

    @property
    def rows(self) -> int:
        return 2 * self.dim

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "k_steps": self.k_steps,
            "partition_m": self.partition,
            "hidden_width": self.hidden_width,
            "mlp_depth": self.mlp_depth,
            "scale_clamp": self.scale_clamp,
        }


def squeeze(w) -> np.ndarray:
    """Complex M-vector -> ``M x 2`` real tensor (real, imaginary columns)."""
    w = np.asarray(w, dtype=np.complex128)
    return np.stack([w.real, w.imag], axis=-1)


def unsqueeze(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return join_complex(h[..., 0], h[..., 1])


def to_columns(w) -> np.ndarray:
    """Complex samples ``(B, M)`` -> the flow's ``(2M, B)`` column layout."""
    w = np.atleast_2d(np.asarray(w, dtype=np.complex128))
    return np.ascontiguousarray(squeeze(w).reshape(w.shape[0], -1).T)


def from_columns(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return unsqueeze(x.T.reshape(x.shape[1], -1, 2))


def _mlp_shapes(cfg: FlowConfig, n_in: int, n_out: int) -> list[tuple[int, int]]:
    dims = [n_in] + [cfg.hidden_width] * (cfg.mlp_depth - 1) + [n_out]
    return list(zip(dims[1:], dims[:-1]))


def _coupling_io(cfg: FlowConfig, which: int) -> tuple[int, int]:
    upper, lower = cfg.split_row, cfg.rows - cfg.split_row
    # coupling 0 rewrites the lower half from the upper; coupling 1 the reverse
    return (upper, lower) if which == 0 else (lower, upper)


class FlowParams:
    """All trainable arrays of a flow, keyed by dotted names."""

    def __init__(self, config: FlowConfig, arrays: dict[str, np.ndarray], actnorm_ready: list[bool]):
        self.config = config
        self.nodes: dict[str, Node] = {k: ad.parameter(v, name=k) for k, v in arrays.items()}
        self.actnorm_ready = list(actnorm_ready)

    def __getitem__(self, name: str) -> Node:
        return self.nodes[name]

    def parameters(self) -> list[Node]:
        return list(self.nodes.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: n.value.copy() for k, n in self.nodes.items()}

    def copy(self) -> "FlowParams":
        return FlowParams(self.config, self.arrays(), list(self.actnorm_ready))

    def conv_weights(self) -> list[str]:
        return [f"step{k}.conv.weight" for k in range(self.config.k_steps)]


def param_names(cfg: FlowConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for k in range(cfg.k_steps):
        shapes[f"step{k}.actnorm.scale"] = (2, 1)
        shapes[f"step{k}.actnorm.bias"] = (2, 1)
        shapes[f"step{k}.conv.weight"] = (2, 2)
        for j in range(2):
            n_in, n_out = _coupling_io(cfg, j)
            for net in ("scale_net", "bias_net"):
                for li, (o, i) in enumerate(_mlp_shapes(cfg, n_in, n_out)):
                    shapes[f"step{k}.coupling{j}.{net}.layer{li}.weight"] = (o, i)
                    shapes[f"step{k}.coupling{j}.{net}.layer{li}.bias"] = (o, 1)
    shapes["latent.mean"] = (cfg.dim, 2)
    shapes["latent.logvar"] = (cfg.dim, 2)
    return shapes


def init_params(cfg: FlowConfig, seed: int = 0) -> FlowParams:
    """Fresh parameters: identity couplings, rotation convs, unit actnorm.

    Actnorm stays marked uninitialised until it sees the first batch.
    """
    gen = rng.stream(seed, rng.INIT)
    arrays: dict[str, np.ndarray] = {}
    last = cfg.mlp_depth - 1
    for name, shape in param_names(cfg).items():
        if name.endswith("actnorm.scale"):
            arrays[name] = np.ones(shape)
        elif name.endswith("conv.weight"):
            t = gen.uniform(0.0, 2.0 * math.pi)
            arrays[name] = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        elif ".layer" in name and name.endswith(".weight") and f".layer{last}." not in name:
            bound = 1.0 / math.sqrt(shape[1])
            arrays[name] = gen.uniform(-bound, bound, shape)
        else:
            arrays[name] = np.zeros(shape)
    return FlowParams(cfg, arrays, [False] * cfg.k_steps)


# --- constant helpers --------------------------------------------------------


def _ones_row(b: int) -> Node:
    return ad.constant(np.ones((1, b)))


def _channel_expand(dim: int) -> np.ndarray:
    e = np.zeros((2 * dim, 2))
    e[0::2, 0] = 1.0
    e[1::2, 1] = 1.0
    return e


def _interleave_to_planar(dim: int) -> np.ndarray:
    """Permutation taking rows (re1, im1, re2, ...) to (re1..reM, im1..imM)."""
    p = np.zeros((2 * dim, 2 * dim))
    for i in range(dim):
        p[i, 2 * i] = 1.0
        p[dim + i, 2 * i + 1] = 1.0
    return p


_SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])
_DIFF = np.array([[1.0], [-1.0]])


def _det2(w: Node) -> Node:
    r0 = ad.slice_rows(w, 0, 1)
    r1 = ad.matmul(ad.slice_rows(w, 1, 2), ad.constant(_SWAP))
    return ad.matmul(ad.mul(r0, r1), ad.constant(_DIFF))


def _broadcast_col(col: Node, ones: Node) -> Node:
    return ad.matmul(col, ones)


def _row_sum(x: Node) -> Node:
    return ad.matmul(ad.constant(np.ones((1, x.shape[0]))), x)


def _mlp(params: FlowParams, prefix: str, x: Node, ones: Node) -> Node:
    depth = params.config.mlp_depth
    for li in range(depth):
        wt = params[f"{prefix}.layer{li}.weight"]
        bias = params[f"{prefix}.layer{li}.bias"]
        x = ad.add(ad.matmul(wt, x), _broadcast_col(bias, ones))
        if li < depth - 1:
            x = ad.relu(x)
    return x


# --- layers ------------------------------------------------------------------


MAD_TO_STD = 1.4826  # std of a Gaussian per unit median absolute deviation


def actnorm_init(params: FlowParams, step: int, h: np.ndarray, robust: bool = False) -> None:
    """Data-dependent init from the first batch, columns of ``h`` are samples.

    Sets ``scale = 1/std`` and ``bias = -mean/std`` per channel so the batch
    comes out standardised. ``robust`` swaps mean/std for median and
    1.4826*MAD, which agree on Gaussian data but ignore rare impulses.
    """
    if params.actnorm_ready[step]:
        return
    if h.shape[0] * h.shape[1] < 4:
        raise ValueError("actnorm initialisation needs at least two values per channel")
    stats = h.reshape(-1, 2, h.shape[1])  # (M, 2, B)
    if robust:
        flat = stats.transpose(1, 0, 2).reshape(2, -1)
        mean = np.median(flat, axis=1)
        std = MAD_TO_STD * np.median(np.abs(flat - mean[:, None]), axis=1)
    else:
        mean = stats.mean(axis=(0, 2))
        std = stats.std(axis=(0, 2))
    std = np.maximum(std, ACTNORM_STD_FLOOR)
    params[f"step{step}.actnorm.scale"].value = (1.0 / std).reshape(2, 1)
    params[f"step{step}.actnorm.bias"].value = (-mean / std).reshape(2, 1)
    params.actnorm_ready[step] = True


def actnorm_forward(params: FlowParams, step: int, h: Node, ones: Node) -> tuple[Node, Node]:
    s = params[f"step{step}.actnorm.scale"]
    b = params[f"step{step}.actnorm.bias"]
    if np.any(s.value == 0.0):
        raise InvalidParameterError(f"actnorm scale of step {step} has a zero entry")
    dim = params.config.dim
    expand = ad.constant(_channel_expand(dim))
    out = ad.add(
        ad.mul(h, _broadcast_col(ad.matmul(expand, s), ones)),
        _broadcast_col(ad.matmul(expand, b), ones),
    )
    # dim * sum_c log|s_c|; Jacobian of h*s + b (no square root)
    logdet = ad.scale(_row_sum(ad.log(ad.absolute(s))), dim)
    return out, _broadcast_col(logdet, ones)


def invconv_forward(params: FlowParams, step: int, h: Node, ones: Node) -> tuple[Node, Node]:
    w = params[f"step{step}.conv.weight"]
    det = float(np.linalg.det(w.value))
    if abs(det) < DET_FLOOR:
        raise InvalidParameterError(f"1x1 conv weight of step {step} is singular (det={det:.3g})")
    dim, b = params.config.dim, h.shape[1]
    perm = _interleave_to_planar(dim)
    planar = ad.reshape(ad.matmul(ad.constant(perm), h), (2, dim * b))
    mixed = ad.reshape(ad.matmul(w, planar), (2 * dim, b))
    out = ad.matmul(ad.constant(perm.T), mixed)
    logdet = ad.scale(ad.log(ad.absolute(_det2(w))), dim)
    return out, _broadcast_col(logdet, ones)


def coupling_forward(params: FlowParams, step: int, which: int, h: Node, ones: Node) -> tuple[Node, Node]:
    """Affine coupling; ``which=0`` rewrites the lower rows, ``which=1`` the upper.

    The rewritten half becomes ``u * exp(a) + b`` with ``a``, ``b`` computed
    from the other half only, which keeps the Jacobian triangular.
    """
    cut, rows = params.config.split_row, params.config.rows
    upper, lower = ad.slice_rows(h, 0, cut), ad.slice_rows(h, cut, rows)
    cond, u = (upper, lower) if which == 0 else (lower, upper)
    prefix = f"step{step}.coupling{which}"
    a = _mlp(params, f"{prefix}.scale_net", cond, ones)
    c = params.config.scale_clamp
    if c is not None:
        a = ad.scale(ad.tanh(ad.scale(a, 1.0 / c)), c)
    shift = _mlp(params, f"{prefix}.bias_net", cond, ones)
    u_new = ad.add(ad.mul(u, ad.exp(a)), shift)
    out = ad.concat_rows([upper, u_new] if which == 0 else [u_new, lower])
    return out, _row_sum(a)


def latent_logprob(params: FlowParams, z: Node, ones: Node) -> Node:
    rows = params.config.rows
    mu = _broadcast_col(ad.reshape(params["latent.mean"], (rows, 1)), ones)
    logvar = ad.reshape(params["latent.logvar"], (rows, 1))
    inv_var = _broadcast_col(ad.exp(ad.scale(logvar, -1.0)), ones)
    d = ad.sub(z, mu)
    quad = ad.mul(ad.mul(d, d), inv_var)
    per_sample = ad.add(_row_sum(quad), _broadcast_col(_row_sum(logvar), ones))
    return ad.add(ad.scale(per_sample, -0.5), ad.constant(np.full((1, z.shape[1]), -0.5 * rows * LOG_2PI)))


LAYERS = ("actnorm", "invconv", "coupling0", "coupling1")


@dataclass
class FlowTrace:
    activations: list[np.ndarray]  # h_0 .. h_K, each (B, M, 2)
    log_dets: dict[str, np.ndarray]  # per layer, each (B,)
    latent_logprob: np.ndarray
    log_likelihood: np.ndarray = field(default=None)

    @property
    def total_log_det(self) -> np.ndarray:
        return sum(self.log_dets.values())


def _as_samples(x: np.ndarray) -> np.ndarray:
    return x.T.reshape(x.shape[1], -1, 2).copy()


def forward_graph(
    params: FlowParams,
    x: np.ndarray | Node,
    *,
    init_actnorm: bool = False,
    robust_init: bool = False,
    trace: bool = False,
) -> tuple[Node, FlowTrace | None]:
    """Per-sample log-likelihoods ``(1, B)`` of the column batch ``x``."""
    h = x if isinstance(x, Node) else ad.constant(x)
    b = h.shape[1]
    ones = _ones_row(b)
    total = None
    tr = FlowTrace([_as_samples(h.value)], {}, None) if trace else None
    for k in range(params.config.k_steps):
        for layer in LAYERS:
            tag = f"step{k}.{layer}"
            try:
                if layer == "actnorm":
                    if init_actnorm:
                        actnorm_init(params, k, h.value, robust_init)
                    elif not params.actnorm_ready[k]:
                        raise InvalidParameterError(f"actnorm of step {k} was never initialised")
                    h, ld = actnorm_forward(params, k, h, ones)
                elif layer == "invconv":
                    h, ld = invconv_forward(params, k, h, ones)
                else:
                    h, ld = coupling_forward(params, k, int(layer[-1]), h, ones)
            except ad.NumericOverflowError as exc:
                raise FlowNumericError(str(exc), tag) from exc
            total = ld if total is None else ad.add(total, ld)
            if tr is not None:
                tr.log_dets[tag] = ld.value.reshape(-1).copy()
        if tr is not None:
            tr.activations.append(_as_samples(h.value))
    try:
        lat = latent_logprob(params, h, ones)
        ll = ad.add(lat, total)
    except ad.NumericOverflowError as exc:
        raise FlowNumericError(str(exc), "latent") from exc
    if tr is not None:
        tr.latent_logprob = lat.value.reshape(-1).copy()
        tr.log_likelihood = ll.value.reshape(-1).copy()
    return ll, tr


def flow_logprob(params: FlowParams, w) -> tuple[float, FlowTrace]:
    """Log-likelihood of one complex noise vector with its layer trace."""
    w = np.asarray(w, dtype=np.complex128).reshape(1, -1)
    if w.shape[1] != params.config.dim:
        raise ValueError(f"flow dim is {params.config.dim}, input has {w.shape[1]} elements")
    with ad.no_grad():
        ll, tr = forward_graph(params, to_columns(w), trace=True)
    return float(ll.value[0, 0]), tr


def _clamp_np(cfg: FlowConfig, raw: np.ndarray) -> np.ndarray:
    c = cfg.scale_clamp
    return raw if c is None else c * np.tanh(raw / c)


class CompiledFlow:
    """Graph-free evaluator for inference, frozen from a parameter snapshot.

    Computes the same quantity as :func:`forward_graph` with plain numpy
    broadcasting; used by the detectors where millions of candidates are
    scored.

    With ``saturate=True`` a candidate whose activations overflow gets
    log-likelihood ``-inf`` (its density underflows) instead of raising.
    """

    def __init__(self, params: FlowParams, saturate: bool = False):
        self.saturate = saturate
        if not all(params.actnorm_ready):
            raise InvalidParameterError("flow has uninitialised actnorm layers")
        self.params = params
        cfg = self.config = params.config
        a = params.arrays()
        self.cut = cfg.split_row
        expand = _channel_expand(cfg.dim)
        self.steps = []
        const = -0.5 * cfg.rows * LOG_2PI - 0.5 * a["latent.logvar"].sum()
        for k in range(cfg.k_steps):
            s = a[f"step{k}.actnorm.scale"]
            w = a[f"step{k}.conv.weight"]
            if np.any(s == 0.0):
                raise InvalidParameterError(f"actnorm scale of step {k} has a zero entry")
            det = np.linalg.det(w)
            if abs(det) < DET_FLOOR:
                raise InvalidParameterError(f"1x1 conv weight of step {k} is singular")
            const += cfg.dim * (np.log(np.abs(s)).sum() + math.log(abs(det)))
            # actnorm followed by the block-diagonal conv is one affine map
            lin = np.kron(np.eye(cfg.dim), w)
            mat = lin * (expand @ s).reshape(1, -1)
            off = lin @ (expand @ a[f"step{k}.actnorm.bias"])
            nets = []
            for j in range(2):
                pre = f"step{k}.coupling{j}"
                nets.append(
                    tuple(
                        [(a[f"{pre}.{net}.layer{i}.weight"], a[f"{pre}.{net}.layer{i}.bias"]) for i in range(cfg.mlp_depth)]
                        for net in ("scale_net", "bias_net")
                    )
                )
            self.steps.append((mat, off, nets))
        self.mu = a["latent.mean"].reshape(-1, 1)
        self.inv_var = np.exp(-a["latent.logvar"]).reshape(-1, 1)
        self.const = float(const)

    @staticmethod
    def _mlp(layers, x):
        last = len(layers) - 1
        for i, (wt, b) in enumerate(layers):
            x = wt @ x
            x += b
            if i < last:
                np.maximum(x, 0.0, out=x)
        return x

    def columns(self, x: np.ndarray) -> np.ndarray:
        """Log-likelihoods of a ``(2M, B)`` column batch."""
        cut = self.cut
        ll = np.full(x.shape[1], self.const)
        mode = "ignore" if self.saturate else "raise"
        with np.errstate(over=mode, invalid=mode):
            for mat, off, nets in self.steps:
                h = mat @ x
                h += off
                for which, (sn, bn) in enumerate(nets):
                    cond, u = (h[:cut], h[cut:]) if which == 0 else (h[cut:], h[:cut])
                    a = _clamp_np(self.config, self._mlp(sn, cond))
                    ll += a.sum(axis=0)
                    u *= np.exp(a)
                    u += self._mlp(bn, cond)
                x = h
            d = x - self.mu
            d *= d
            d *= self.inv_var
            ll -= 0.5 * d.sum(axis=0)
        if self.saturate:
            ll[~np.isfinite(ll)] = -np.inf
        return ll

    def __call__(self, w, chunk: int = EVAL_CHUNK) -> np.ndarray:
        w = np.asarray(w, dtype=np.complex128)
        if w.shape[-1] != self.config.dim:
            raise ValueError(f"flow dim is {self.config.dim}, input has {w.shape[-1]} elements")
        lead = w.shape[:-1]
        flat = w.reshape(-1, w.shape[-1])
        out = np.empty(flat.shape[0])
        for lo in range(0, flat.shape[0], chunk):
            try:
                out[lo : lo + chunk] = self.columns(to_columns(flat[lo : lo + chunk]))
            except FloatingPointError as exc:
                raise FlowNumericError(str(exc), "compiled") from exc
        return out.reshape(lead)


def log_likelihood(params: FlowParams, w, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Vectorised log-likelihoods of complex samples ``w`` with shape ``(..., M)``."""
    w = np.asarray(w, dtype=np.complex128)
    if w.shape[-1] != params.config.dim:
        raise ValueError(f"flow dim is {params.config.dim}, input has {w.shape[-1]} elements")
    lead = w.shape[:-1]
    flat = w.reshape(-1, w.shape[-1])
    out = np.empty(flat.shape[0])
    with ad.no_grad():
        for lo in range(0, flat.shape[0], chunk):
            ll, _ = forward_graph(params, to_columns(flat[lo : lo + chunk]))
            out[lo : lo + chunk] = ll.value[0]
    return out.reshape(lead)


def nll_loss(params: FlowParams, batch: np.ndarray) -> Node:
    """Mean negative log-likelihood of a column batch, on the autodiff graph."""
    if batch.shape[1] < 1:
        raise ValueError("empty batch")
    ll, _ = forward_graph(params, batch)
    return ad.scale(ad.sum_all(ll), -1.0 / batch.shape[1])


# --- analytic inverse ----------------------------------------------------------


def _mlp_np(params: FlowParams, prefix: str, x: np.ndarray) -> np.ndarray:
    depth = params.config.mlp_depth
    for li in range(depth):
        x = params[f"{prefix}.layer{li}.weight"].value @ x + params[f"{prefix}.layer{li}.bias"].value
        if li < depth - 1:
            x = np.maximum(x, 0.0)
    return x


def flow_inverse(params: FlowParams, z: np.ndarray) -> np.ndarray:
    """Map latent columns back to data columns, layer by layer in reverse."""
    cfg = params.config
    h = np.array(z, dtype=np.float64)
    cut, dim = cfg.split_row, cfg.dim
    perm = _interleave_to_planar(dim)
    expand = _channel_expand(dim)
    for k in reversed(range(cfg.k_steps)):
        for which in (1, 0):
            upper, lower = h[:cut], h[cut:]
            cond, out = (upper, lower) if which == 0 else (lower, upper)
            prefix = f"step{k}.coupling{which}"
            a = _clamp_np(params.config, _mlp_np(params, f"{prefix}.scale_net", cond))
            shift = _mlp_np(params, f"{prefix}.bias_net", cond)
            u = (out - shift) * np.exp(-a)
            h = np.concatenate([upper, u] if which == 0 else [u, lower])
        b = h.shape[1]
        w_inv = np.linalg.inv(params[f"step{k}.conv.weight"].value)
        planar = (perm @ h).reshape(2, dim * b)
        h = perm.T @ (w_inv @ planar).reshape(2 * dim, b)
        s = expand @ params[f"step{k}.actnorm.scale"].value
        bias = expand @ params[f"step{k}.actnorm.bias"].value
        h = (h - bias) / s
    return h
