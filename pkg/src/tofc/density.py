"""Hyperprior entropy model: factorized density for the hyperprior, conditional
Laplacian for the merged features, straight-through quantization and rate
estimates.

Two evaluation paths exist. The graph path (``Tensor`` inputs, float64) is
used for training. The inference path (plain arrays) rounds every parameter
through float32 first so that an in-memory model and one reloaded from a
TFCP file produce identical symbols and statistics.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .numerics import autodiff as ad
from .numerics.autodiff import Tensor
from .numerics.nets import DenseNet

SCALE_FLOOR = 1e-3
PMF_FLOOR = 2.0**-16
TRAIN_LIKELIHOOD_FLOOR = 1e-9
SYMBOL_MAX = 2**15 - 1
LN2 = np.log(2.0)
_LOG_TINY = -745.0


def round_half_away(x):
    """Round to nearest integer, ties away from zero, independent of FPU mode."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def softplus_inverse(y):
    return float(np.log(np.expm1(y)))


class OffsetTape:
    """Records rounding offsets of every straight-through quantization, then
    replays them.

    Replaying turns the quantized forward pass into a smooth function of
    the parameters whose exact derivative is the straight-through gradient,
    which is what finite-difference checks need.
    """

    def __init__(self):
        self.offsets = []
        self.replaying = False
        self._cursor = 0

    def replay(self):
        self.replaying = True
        self._cursor = 0
        return self

    def offset(self, residual):
        if not self.replaying:
            off = round_half_away(residual) - residual
            self.offsets.append(off)
            return off
        off = self.offsets[self._cursor]
        self._cursor += 1
        return off


def quantize_ste(v, anchor, tape=None):
    """``round(v - anchor) + anchor`` forward, identity gradient in ``v``.

    The gradient with respect to ``anchor`` cancels: the rounded term passes
    ``-1`` straight through and the re-added anchor passes ``+1``.
    """
    residual = ad.sub(v, anchor)
    r = residual.data if isinstance(residual, Tensor) else np.asarray(residual, dtype=np.float64)
    off = tape.offset(r) if tape is not None else round_half_away(r) - r
    return ad.add(ad.add(residual, off), anchor)


def laplace_log_pmf(r, b):
    """Natural log of the unit-bin mass of a zero-mean Laplacian at ``r``.

    ``log(F(r + 1/2) - F(r - 1/2))`` with ``F`` the Laplace CDF of scale
    ``b``, evaluated in closed form so it stays finite far into the tails.
    Differentiable in both ``r`` and ``b`` when given Tensors.
    """
    rd = r.data if isinstance(r, Tensor) else np.asarray(r, dtype=np.float64)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    rd, bd = np.broadcast_arrays(rd, bd)
    a = np.abs(rd)
    tail = a >= 0.5
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        e_inv = np.exp(-1.0 / bd)
        log_tail = np.log(0.5) + (0.5 - a) / bd + np.log1p(-e_inv)
        e1 = np.exp((a - 0.5) / bd)
        e2 = np.exp((-a - 0.5) / bd)
        p_core = -0.5 * (np.expm1((a - 0.5) / bd) + np.expm1((-a - 0.5) / bd))
        log_core = np.log(p_core)
        value = np.where(tail, log_tail, log_core)
        if not (isinstance(r, Tensor) or isinstance(b, Tensor)):
            return value
        ratio = e_inv / -np.expm1(-1.0 / bd)
        d_a = np.where(tail, -1.0 / bd, -0.5 * (e1 - e2) / bd / p_core)
        d_b = np.where(
            tail,
            ((a - 0.5) - ratio) / bd**2,
            0.5 / bd**2 * ((a - 0.5) * e1 - (a + 0.5) * e2) / p_core,
        )
    d_r = np.sign(rd) * d_a
    r_shape = np.shape(r.data if isinstance(r, Tensor) else r)
    b_shape = np.shape(b.data if isinstance(b, Tensor) else b)
    return ad.custom(
        (r, b),
        value,
        (
            lambda g: ad._unbroadcast(g * d_r, r_shape),
            lambda g: ad._unbroadcast(g * d_b, b_shape),
        ),
    )


def laplace_pmf(k, mu_frac, b):
    """Probability of integer ``k`` under a Laplacian of scale ``b`` centred at ``mu_frac``."""
    return np.exp(laplace_log_pmf(np.asarray(k, dtype=np.float64) - mu_frac, b))


def laplace_bits(k, b, mu_frac=0.0):
    return -laplace_log_pmf(np.asarray(k, dtype=np.float64) - mu_frac, b) / LN2


def _log_sigmoid(x):
    return -ad._softplus_np(-x)


class FactorizedDensity:
    """Per-channel learned cumulative ``c(x)`` built from small monotone layers.

    Each channel runs ``1 -> 3 -> 3 -> 3 -> 1`` affine maps with softplus-
    constrained weights and tanh-gated nonlinearities, then a sigmoid.
    Biases start at zero, so the fresh model is symmetric with median 0.
    """

    def __init__(self, store, prefix, channels, filters=(3, 3, 3), init_scale=10.0):
        self.prefix = prefix
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(dims) - 1):
            init = np.log(np.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(store.add(f"{prefix}.matrix{i}", np.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(store.add(f"{prefix}.bias{i}", np.zeros((channels, dims[i + 1]))))
            if i < len(dims) - 2:
                self.factors.append(store.add(f"{prefix}.factor{i}", np.zeros((channels, dims[i + 1]))))

    def _layers(self, rounded):
        if rounded is None:
            return [
                (m, b, self.factors[i] if i < len(self.factors) else None)
                for i, (m, b) in enumerate(zip(self.matrices, self.biases))
            ]

        def arr(t):
            d = t.data
            return d.astype(np.float32).astype(np.float64) if rounded else d

        return [
            (arr(m), arr(b), arr(self.factors[i]) if i < len(self.factors) else None)
            for i, (m, b) in enumerate(zip(self.matrices, self.biases))
        ]

    def logits(self, x, rounded=None):
        """Pre-sigmoid cumulative values for ``x`` of shape ``(N, channels)``.

        ``rounded=None`` builds a graph over the live parameters; ``True`` or
        ``False`` evaluate in numpy with or without float32 parameter rounding.
        """
        shape = np.shape(x.data if isinstance(x, Tensor) else x)
        if shape[-1] != self.channels:
            raise InvalidArgumentError(f"expected {self.channels} channels, got {shape[-1]}")
        n = int(np.prod(shape[:-1], dtype=np.int64))
        h = ad.reshape(x, (n, self.channels, 1))
        for mat, bias, factor in self._layers(rounded):
            w = ad.softplus(mat)
            width = w.shape[2]
            h = ad.tsum(ad.mul(ad.reshape(h, (n, self.channels, 1, width)), w), axis=-1)
            h = ad.add(h, bias)
            if factor is not None:
                h = ad.add(h, ad.mul(ad.tanh(factor), ad.tanh(h)))
        return ad.reshape(h, shape)

    def cdf(self, x, rounded=True):
        return ad._sigmoid_np(self.logits(np.asarray(x, dtype=np.float64), rounded=rounded))

    def _solve(self, target_logit, rounded, tol=4e-6, max_iter=100):
        """Per-channel root of ``logits(x) = target`` by bracketing bisection."""
        c = self.channels
        lo, hi = np.full(c, -1.0), np.full(c, 1.0)
        for _ in range(64):
            f = self.logits(lo[None], rounded)[0] - target_logit
            if np.all(f < 0):
                break
            lo = np.where(f >= 0, lo * 2.0, lo)
        for _ in range(64):
            f = self.logits(hi[None], rounded)[0] - target_logit
            if np.all(f > 0):
                break
            hi = np.where(f <= 0, hi * 2.0, hi)
        mid = 0.5 * (lo + hi)
        iters = 0
        for iters in range(1, max_iter + 1):
            mid = 0.5 * (lo + hi)
            f = self.logits(mid[None], rounded)[0] - target_logit
            if np.all(np.abs(f) < tol):
                break
            lo = np.where(f < 0, mid, lo)
            hi = np.where(f > 0, mid, hi)
        return mid, iters

    def median(self, rounded=True, return_iterations=False):
        m, iters = self._solve(0.0, rounded)
        return (m, iters) if return_iterations else m

    def quantile(self, q, rounded=True):
        return self._solve(float(np.log(q) - np.log1p(-q)), rounded, tol=1e-3)[0]

    def log_pmf(self, zbar, floor=TRAIN_LIKELIHOOD_FLOOR):
        """Graph-friendly ``log(c(z + 1/2) - c(z - 1/2))`` with a likelihood floor."""
        lower = self.logits(ad.sub(zbar, 0.5))
        upper = self.logits(ad.add(zbar, 0.5))
        s = np.where(lower.data + upper.data > 0, -1.0, 1.0) if isinstance(lower, Tensor) else np.where(
            lower + upper > 0, -1.0, 1.0
        )
        p = ad.absolute(ad.sub(ad.sigmoid(ad.mul(upper, s)), ad.sigmoid(ad.mul(lower, s))))
        return ad.log(ad.clamp_min(p, floor))

    def log_pmf_exact(self, zbar, rounded=True):
        """Natural-log bin mass in numpy, accurate deep into the tails."""
        zbar = np.asarray(zbar, dtype=np.float64)
        lo = self.logits(zbar - 0.5, rounded)
        up = self.logits(zbar + 0.5, rounded)
        flip = lo + up > 0
        a = np.where(flip, -lo, up)
        c = np.where(flip, -up, lo)
        la, lc = _log_sigmoid(a), _log_sigmoid(c)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = la + np.log1p(-np.exp(np.minimum(lc - la, 0.0)))
        return np.maximum(np.nan_to_num(out, nan=_LOG_TINY, neginf=_LOG_TINY), _LOG_TINY)

    def pmf(self, offsets, medians=None, rounded=True):
        """Bin masses on the median-anchored grid: ``P(n) = c(m+n+1/2) - c(m+n-1/2)``.

        ``offsets`` has shape ``(S, channels)`` or ``(S,)`` (broadcast over channels).
        """
        m = self.median(rounded) if medians is None else np.asarray(medians, dtype=np.float64)
        n = np.asarray(offsets, dtype=np.float64)
        if n.ndim == 1:
            n = np.repeat(n[:, None], self.channels, axis=1)
        p = self.cdf(m + n + 0.5, rounded) - self.cdf(m + n - 0.5, rounded)
        if np.any(p < -1e-12):
            raise AssertionError("factorized cumulative is not monotone")
        return np.maximum(p, 0.0)

    def fit(self, samples, store, steps=400, lr=0.02):
        """Maximum-likelihood fit to integer ``samples`` of shape ``(N, channels)``.

        Only this density's parameters are updated.
        """
        from .numerics.nets import adam_step, ParamStore

        samples = np.asarray(samples, dtype=np.float64)
        local = ParamStore()
        for name, t in store.items():
            if name.startswith(self.prefix + "."):
                local.params[name] = t
        for _ in range(steps):
            local.zero_grad()
            loss = ad.mean(ad.mul(self.log_pmf(samples), -1.0))
            loss.backward()
            adam_step(local, lr=lr)
        return self


@dataclass
class CodeTensors:
    """Quantized symbols and conditioning statistics for a set of features.

    ``k`` are integer residuals of the (gain-scaled) features against ``mu``;
    ``zs`` are hyperprior symbols relative to the per-channel median.
    """

    k: np.ndarray  # (N, d_v) int32
    zs: np.ndarray  # (N, d_z) int32
    mu: np.ndarray  # (N, d_v) float32
    b: np.ndarray  # (N, d_v) float32
    recon: np.ndarray  # (N, d_v) float32

    @property
    def ybar(self):
        return self.k.astype(np.float32) + self.mu


@dataclass(frozen=True)
class RateEstimate:
    bits_y: float
    bits_z: float
    elements: int

    @property
    def bits(self):
        return self.bits_y + self.bits_z

    @property
    def bits_per_element(self):
        return self.bits / self.elements if self.elements else 0.0


class EntropyModel:
    """One hyperprior codec instance.

    ``h_a`` maps a merged feature to its hyperprior ``z`` (``d_v -> d_v/4 ->
    d_z``); ``h_s`` maps the quantized hyperprior to Laplacian mean and raw
    scale (``d_z -> d_v/4 -> 2 d_v``). A per-channel log-gain scales features
    before quantization and is undone on reconstruction; at zero it is inert.
    """

    def __init__(self, store, prefix, d_v, d_z=None, rng=None, learn_gain=True):
        d_z = d_z if d_z is not None else max(1, d_v // 16)
        if d_v < 1 or d_z < 1:
            raise InvalidArgumentError("d_v and d_z must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.prefix = prefix
        self.d_v = d_v
        self.d_z = d_z
        self.learn_gain = learn_gain
        hidden = max(d_z, d_v // 4)
        self.h_a = DenseNet(store, f"{prefix}.h_a", [d_v, hidden, d_z], ["relu", "identity"], rng=rng)
        self.h_s = DenseNet(store, f"{prefix}.h_s", [d_z, hidden, 2 * d_v], ["relu", "identity"], rng=rng, init="small")
        self.log_gain = store.add(f"{prefix}.log_gain", np.zeros(d_v))
        self.factorized = FactorizedDensity(store, f"{prefix}.factorized", d_z)
        self._median_cache = None

    # inference path -----------------------------------------------------

    def refresh(self):
        """Drop caches derived from parameter values (call after updates)."""
        self._median_cache = None
        self.__dict__.pop("_hyper_tables", None)

    def medians(self):
        if self._median_cache is None:
            self._median_cache = self.factorized.median(rounded=True).astype(np.float32)
        return self._median_cache

    def gain(self, dtype=np.float32):
        return np.exp(self.log_gain.data.astype(dtype))

    def hyper_analyze(self, y, dtype=np.float32):
        return self.h_a.forward(y, dtype=dtype)

    def hyper_synthesize(self, zbar, dtype=np.float32):
        out = self.h_s.forward(zbar, dtype=dtype)
        mu = out[..., : self.d_v]
        b = np.maximum(ad._softplus_np(out[..., self.d_v :]), dtype(SCALE_FLOOR)).astype(dtype)
        return mu, b

    def stats_from_symbols(self, zs):
        """Conditioning ``(mu, b)`` from hyper symbols; shared by encoder and decoder."""
        zbar = (np.asarray(zs, dtype=np.float32) + self.medians()).astype(np.float32)
        return self.hyper_synthesize(zbar, np.float32)

    def reconstruct(self, k, mu):
        return ((np.asarray(k, dtype=np.float32) + mu) / self.gain()).astype(np.float32)

    def compress(self, y):
        """Quantize ``y`` of shape ``(N, d_v)`` into symbols (float32 throughout)."""
        y = np.asarray(y, dtype=np.float32)
        if y.ndim != 2 or y.shape[1] != self.d_v:
            raise InvalidArgumentError(f"expected (N, {self.d_v}) features, got {y.shape}")
        z = self.hyper_analyze(y)
        zs = np.clip(round_half_away(z - self.medians()), -SYMBOL_MAX, SYMBOL_MAX).astype(np.int32)
        mu, b = self.stats_from_symbols(zs)
        u = (y * self.gain()).astype(np.float32)
        k = np.clip(round_half_away(u - mu), -SYMBOL_MAX, SYMBOL_MAX).astype(np.int32)
        return CodeTensors(k=k, zs=zs, mu=mu, b=b, recon=self.reconstruct(k, mu))

    def estimate_rate(self, codes, elements=None):
        """Entropy-model code length: ``-sum log2 p(y|z) - sum log2 p(z)``."""
        bits_y = float(laplace_bits(codes.k, codes.b.astype(np.float64)).sum())
        zbar = codes.zs.astype(np.float64) + self.medians().astype(np.float64)
        bits_z = float(-self.factorized.log_pmf_exact(zbar).sum() / LN2) if codes.zs.size else 0.0
        return RateEstimate(bits_y, bits_z, codes.k.size if elements is None else elements)

    # training path --------------------------------------------------------

    def forward_train(self, y, tape=None):
        """Straight-through pass over ``y`` of shape ``(N, d_v)``.

        Returns ``(recon, bits_y, bits_z)``; the bit terms are per feature
        Tensors of shape ``(N,)``.
        """
        y = np.asarray(y, dtype=np.float64)
        z = self.h_a(y)
        m = self.factorized.median(rounded=False)
        zbar = quantize_ste(z, m, tape)
        stats = self.h_s(zbar)
        mu = stats[:, : self.d_v]
        b = ad.clamp_min(ad.softplus(stats[:, self.d_v :]), SCALE_FLOOR)
        if self.learn_gain:
            gain = ad.exp(self.log_gain)
        else:
            gain = np.exp(self.log_gain.data)
        u = ad.mul(y, gain)
        ubar = quantize_ste(u, mu, tape)
        logp_y = laplace_log_pmf(ad.sub(ubar, mu), b)
        logp_z = self.factorized.log_pmf(zbar)
        bits_y = ad.mul(ad.tsum(logp_y, axis=1), -1.0 / LN2)
        bits_z = ad.mul(ad.tsum(logp_z, axis=1), -1.0 / LN2)
        return ad.div(ubar, gain), bits_y, bits_z

    def parameter_prefix(self):
        return self.prefix + "."
