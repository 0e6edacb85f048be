"""Rate-distortion training of the selective entropy model bank.

One step merges nothing (features arrive merged), runs every entropy model
with straight-through quantization, mixes their decodes with temperature
softmax router weights, and minimizes ``L = D + lambda * R + L_balance``
with Adam. Everything is full batch and deterministic per seed.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .codec.container import compress_request, decode_request
from .density import LN2, OffsetTape, laplace_log_pmf, round_half_away
from .errors import ConfigError, InvalidArgumentError, TrainingDivergence
from .features import FeatureTensor
from .merge import DEFAULT_K, MergedFeatures, merge
from .numerics import autodiff as ad
from .numerics.nets import adam_step
from .selector import (
    ModelBank,
    balance_loss,
    hard_select,
    mixture_decode,
    mixture_rate,
    one_hot,
    route,
    side_info_bits,
    soft_weights,
)

HISTORY_FIELDS = ("step", "L", "D", "R", "Lbal", "T")
SWEEP_FIELDS = ("lambda", "n_c", "bits_per_element", "distortion")
ROUTINGS = ("soft", "straight_through")


@dataclass
class TrainConfig:
    """Training hyper-parameters. ``lam`` is the rate weight and ``alpha``
    the balance weight; temperatures decay geometrically over ``steps``.

    ``routing="soft"`` mixes decodes and rates with the temperature-softmax
    weights. ``"straight_through"`` uses the hard one-hot selection in the
    forward pass and the soft weights' gradient in the backward pass, so
    training sees exactly the inference-time routing. ``router_lr_scale``
    multiplies the router's step size.
    """

    lam: float = 0.01
    alpha: float = 0.001
    t_start: float = 10.0
    t_end: float = 0.1
    steps: int = 500
    lr: float = 1e-3
    n_c: int = 8
    k: int = DEFAULT_K
    n_e: int = 16
    seed: int = 0
    d_z: int = None
    distortion: str = "mse"
    probe_dim: int = 8
    learn_gain: bool = True
    routing: str = "soft"
    router_lr_scale: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lam > 0:
            raise ConfigError(f"lam must be > 0, got {self.lam}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not self.t_start >= self.t_end > 0:
            raise ConfigError(f"need t_start >= t_end > 0, got {self.t_start}, {self.t_end}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.n_c < 1 or self.k < 1 or self.n_e < 1:
            raise ConfigError("n_c, k and n_e must be >= 1")
        if self.routing not in ROUTINGS:
            raise ConfigError(f"routing must be one of {sorted(ROUTINGS)}, got {self.routing!r}")
        if not self.router_lr_scale > 0:
            raise ConfigError("router_lr_scale must be > 0")
        if self.distortion not in DISTORTIONS:
            raise ConfigError(f"distortion must be one of {sorted(DISTORTIONS)}, got {self.distortion!r}")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return asdict(self)


def load_config(path):
    """Read a JSON config file.

    The ``train`` section maps to :class:`TrainConfig`; other sections
    (``data``, ``channel``, ``server``) are returned untouched.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path!r} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    return TrainConfig.from_dict(raw.get("train", {})), raw


# distortion proxies ------------------------------------------------------------


@dataclass
class DistortionProxy:
    """Squared-error distortion, optionally through a fixed random probe.

    ``kind="mse"`` compares features directly. ``kind="probe"`` first maps
    both sides through a seeded ``d_v x probe_dim`` matrix, a stand-in for
    a downstream task that only sees some directions of feature space.
    """

    kind: str = "mse"
    d_v: int = None
    probe_dim: int = 8
    seed: int = 0
    matrix: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in DISTORTIONS:
            raise InvalidArgumentError(f"unknown distortion proxy {self.kind!r}")
        if self.kind == "probe" and self.matrix is None:
            if self.d_v is None:
                raise InvalidArgumentError("probe distortion needs d_v")
            rng = np.random.default_rng(self.seed)
            self.matrix = rng.normal(0.0, 1.0 / math.sqrt(self.d_v), size=(self.d_v, self.probe_dim))

    def __call__(self, ybar, y):
        diff = ad.sub(ybar, y)
        if self.kind == "probe":
            diff = ad.matmul(diff, self.matrix)
        return ad.mean(ad.mul(diff, diff))

    def value(self, ybar, y):
        return float(self(np.asarray(ybar, dtype=np.float64), np.asarray(y, dtype=np.float64)))


DISTORTIONS = ("mse", "probe")


def make_distortion(config, d_v):
    return DistortionProxy(config.distortion, d_v=d_v, probe_dim=config.probe_dim, seed=config.seed)


# loss -------------------------------------------------------------------------


@dataclass
class LossTerms:
    L: object
    D: object
    R: object
    Lbal: object
    weights: object

    def values(self):
        return {name: float(ad._data(getattr(self, name))) for name in ("L", "D", "R", "Lbal")}


def temperature(step, config):
    """Geometric schedule from ``t_start`` at step 0 to ``t_end`` at ``steps``."""
    if not 0 <= step <= config.steps:
        raise InvalidArgumentError(f"step must lie in [0, {config.steps}], got {step}")
    return config.t_start * (config.t_end / config.t_start) ** (step / config.steps)


def prepare_batch(dataset, config):
    """Merged features ``(n_p, n_c, d_v)`` as float64.

    Raw :class:`FeatureTensor` input is merged with ``config.n_c`` and
    ``config.k``; :class:`MergedFeatures` pass through.
    """
    if isinstance(dataset, MergedFeatures):
        return dataset.data.astype(np.float64)
    if isinstance(dataset, FeatureTensor):
        return merge(dataset, config.n_c, config.k).data
    raise InvalidArgumentError("dataset must be a FeatureTensor or MergedFeatures")


def total_loss(y, bank, config, step=0, distortion=None, tape=None, lam=None, temp=None):
    """Assemble ``L = D + lam * R + L_balance`` on merged features ``y``.

    ``R`` is the router-weighted code length in bits per element, counting
    both the conditional Laplacian and the factorized hyperprior terms.
    ``lam`` and ``temp`` override the config when given.
    """
    y = np.asarray(y, dtype=np.float64)
    flat = y.reshape(-1, y.shape[-1])
    lam = config.lam if lam is None else lam
    temp = temperature(step, config) if temp is None else temp
    distortion = distortion if distortion is not None else make_distortion(config, flat.shape[1])
    weights = soft_weights(bank.router(flat), temp)
    if config.routing == "straight_through":
        hard = one_hot(np.argmax(weights.data, axis=-1), bank.n_e)
        weights = ad.add(weights, hard - weights.data)
    decoded, rates = [], []
    for model in bank.models:
        recon, bits_y, bits_z = model.forward_train(flat, tape)
        decoded.append(recon)
        rates.append(ad.add(bits_y, bits_z))
    mixed = mixture_decode(decoded, weights)
    D = distortion(mixed, flat)
    R = mixture_rate(rates, weights, flat.size)
    Lbal = balance_loss(weights, config.alpha)
    L = ad.add(ad.add(D, ad.mul(R, lam)), Lbal)
    return LossTerms(L, D, R, Lbal, weights)


# training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    bank: ModelBank
    history: list
    config: TrainConfig


def _check_finite(terms, step, history):
    for name, v in terms.values().items():
        if not math.isfinite(v):
            raise TrainingDivergence(f"non-finite {name}={v} at step {step}", history)


def train(dataset, config, bank=None, log_every=1):
    """Full-batch Adam training of a bank on ``dataset``.

    Returns a :class:`TrainResult` whose history holds one row per logged
    step with the loss terms, the temperature and mean router usage.
    """
    config.validate()
    y = prepare_batch(dataset, config)
    if y.size == 0:
        raise InvalidArgumentError("empty dataset")
    d_v = y.shape[-1]
    if bank is None:
        bank = ModelBank(d_v, config.n_e, config.d_z, seed=config.seed, learn_gain=config.learn_gain)
    elif bank.d_v != d_v:
        raise ConfigError(f"bank has d_v={bank.d_v}, data has {d_v}")
    distortion = make_distortion(config, d_v)
    history = []
    for step in range(config.steps):
        bank.store.zero_grad()
        temp = temperature(step, config)
        terms = total_loss(y, bank, config, step, distortion)
        row = {"step": step, **terms.values(), "T": temp}
        usage = ad._data(terms.weights).reshape(-1, bank.n_e).mean(axis=0)
        row.update({f"usage_{e}": float(u) for e, u in enumerate(usage)})
        if step % log_every == 0 or step == config.steps - 1:
            history.append(row)
        _check_finite(terms, step, history)
        terms.L.backward()
        for name, p in bank.store.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingDivergence(f"non-finite gradient for {name} at step {step}", history)
        adam_step(bank.store, lr=config.lr, lr_scales={"router.": config.router_lr_scale})
        bank.refresh()
    return TrainResult(bank, history, config)


def write_history(history, path):
    if not history:
        raise InvalidArgumentError("empty history")
    usage = sorted((k for k in history[0] if k.startswith("usage_")), key=lambda k: int(k[6:]))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(HISTORY_FIELDS) + usage)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in writer.fieldnames})


def read_history(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class Evaluation:
    bits_per_element: float  # entropy-model estimate plus side information
    distortion: float
    estimated_bits: float
    side_bits: int
    elements: int
    usage: np.ndarray
    hard_index: np.ndarray


def evaluate(bank, y, distortion=None):
    """Hard-routed rate and distortion of ``bank`` on merged features ``y``.

    Uses the inference path: float32 symbols, estimated code lengths in the
    exact log domain, plus ``ceil(log2 n_e)`` side bits per feature.
    """
    y = np.asarray(y.data if isinstance(y, MergedFeatures) else y, dtype=np.float64)
    flat = y.reshape(-1, y.shape[-1])
    idx = hard_select(route(bank, flat.astype(np.float32), dtype=np.float32))
    recon = np.zeros_like(flat)
    bits = 0.0
    for e in np.unique(idx):
        rows = np.flatnonzero(idx == e)
        codes = bank.models[e].compress(flat[rows])
        recon[rows] = codes.recon
        bits += bank.models[e].estimate_rate(codes).bits
    distortion = distortion if distortion is not None else DistortionProxy("mse")
    side = side_info_bits(flat.shape[0], bank.n_e)
    usage = np.bincount(idx, minlength=bank.n_e) / idx.size
    return Evaluation(
        bits_per_element=(bits + side) / flat.size,
        distortion=distortion.value(recon, flat),
        estimated_bits=bits,
        side_bits=side,
        elements=flat.size,
        usage=usage,
        hard_index=idx.reshape(y.shape[:-1]),
    )


def rd_sweep(dataset, lambdas, ncs, config):
    """Train one bank per ``(lambda, n_c)`` pair and evaluate it.

    Returns rows ``{"lambda", "n_c", "bits_per_element", "distortion"}`` in
    grid order (``n_c`` outer, ``lambda`` inner).
    """
    if not lambdas or not ncs:
        raise InvalidArgumentError("empty sweep grid")
    rows = []
    for n_c in ncs:
        for lam in lambdas:
            cfg = TrainConfig.from_dict({**config.to_dict(), "lam": lam, "n_c": n_c})
            y = prepare_batch(dataset, cfg)
            result = train(MergedFeatures(y, None, 0), cfg, log_every=cfg.steps)
            ev = evaluate(result.bank, y, make_distortion(cfg, y.shape[-1]))
            rows.append(
                {"lambda": lam, "n_c": n_c, "bits_per_element": ev.bits_per_element, "distortion": ev.distortion}
            )
    return rows


def write_sweep(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(SWEEP_FIELDS))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in SWEEP_FIELDS})


def read_sweep(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_FIELDS:
            raise ConfigError(f"unexpected sweep header {reader.fieldnames}")
        return [
            {
                "lambda": float(r["lambda"]),
                "n_c": int(r["n_c"]),
                "bits_per_element": float(r["bits_per_element"]),
                "distortion": float(r["distortion"]),
            }
            for r in reader
        ]


# heuristic baseline -------------------------------------------------------------


@dataclass(frozen=True)
class HeuristicResult:
    bit_length: int
    bits_per_element: float
    distortion: float


def heuristic_baseline(y, bit_length, percentile=99.9):
    """Linear-scaling quantizer with a batch-statistics Laplacian model.

    Features are scaled so the ``percentile`` of their magnitudes lands on
    the largest signed integer of ``bit_length`` bits, rounded and clipped.
    Each channel's code length then comes from a Laplacian whose mean and
    scale are that channel's batch statistics.
    """
    if bit_length < 2:
        raise InvalidArgumentError("bit_length must be >= 2")
    y = np.asarray(y, dtype=np.float64)
    flat = y.reshape(-1, y.shape[-1])
    top = 2 ** (bit_length - 1) - 1
    ref = np.percentile(np.abs(flat), percentile)
    scale = top / ref if ref > 0 else 1.0
    q = np.clip(round_half_away(flat * scale), -top, top)
    mean = q.mean(axis=0)
    b = np.maximum(np.abs(q - mean).mean(axis=0), 1e-3)
    bits = float(-laplace_log_pmf(q - mean, b).sum() / LN2)
    recon = q / scale
    return HeuristicResult(bit_length, bits / flat.size, float(np.mean((recon - flat) ** 2)))


def heuristic_at_distortion(y, target, max_bits=24):
    """Cheapest bit length whose heuristic distortion is at most ``target``."""
    for bit_length in range(2, max_bits + 1):
        res = heuristic_baseline(y, bit_length)
        if res.distortion <= target:
            return res
    raise InvalidArgumentError(f"no bit length up to {max_bits} reaches distortion {target}")


# estimator ----------------------------------------------------------------------


class TofcCompressor(TransformerMixin, BaseEstimator):
    """Merge, train and code visual features behind the usual estimator API.

    ``fit`` trains a bank on ``(n_p, n_v, d_v)`` features; ``transform``
    returns the decoded merged features of shape ``(n_p, n_c, d_v)``;
    ``encode`` and ``decode`` work with container bytes.

    Parameters
    ----------
    n_c, k : int
        Merged features per patch and density neighbor count.
    n_e : int
        Entropy models in the bank.
    lam, alpha : float
        Rate and balance weights.
    steps, lr : training length and Adam step size.
    t_start, t_end : temperature schedule endpoints.
    d_z : int or None
        Hyperprior width, ``max(1, d_v // 16)`` when None.
    seed : int
    routing : {"soft", "straight_through"}
        See :class:`TrainConfig`.
    """

    def __init__(
        self,
        n_c=8,
        k=DEFAULT_K,
        n_e=2,
        lam=0.01,
        alpha=0.001,
        steps=200,
        lr=0.01,
        t_start=10.0,
        t_end=0.1,
        d_z=None,
        seed=0,
        routing="soft",
    ):
        self.n_c = n_c
        self.k = k
        self.n_e = n_e
        self.lam = lam
        self.alpha = alpha
        self.steps = steps
        self.lr = lr
        self.t_start = t_start
        self.t_end = t_end
        self.d_z = d_z
        self.seed = seed
        self.routing = routing

    def _config(self):
        return TrainConfig(
            lam=self.lam,
            alpha=self.alpha,
            t_start=self.t_start,
            t_end=self.t_end,
            steps=self.steps,
            lr=self.lr,
            n_c=self.n_c,
            k=self.k,
            n_e=self.n_e,
            seed=self.seed,
            d_z=self.d_z,
            routing=self.routing,
        )

    @staticmethod
    def _features(X):
        return X if isinstance(X, FeatureTensor) else FeatureTensor(np.asarray(X, dtype=np.float32))

    def fit(self, X, y=None):
        X = self._features(X)
        result = train(X, self._config(), log_every=max(1, self.steps // 100))
        self.bank_ = result.bank
        self.history_ = result.history
        self.n_features_in_ = X.d_v
        return self

    def _merged(self, X):
        check_is_fitted(self, "bank_")
        X = self._features(X)
        if X.d_v != self.n_features_in_:
            raise InvalidArgumentError(f"fitted on d_v={self.n_features_in_}, got {X.d_v}")
        return merge(X, self.n_c, self.k).data

    def encode(self, X):
        return compress_request(self._merged(X), self.bank_).bitstream.to_bytes()

    def decode(self, data):
        check_is_fitted(self, "bank_")
        return decode_request(data, self.bank_).reconstruction

    def transform(self, X):
        return compress_request(self._merged(X), self.bank_).reconstruction

    def score(self, X, y=None):
        """Negative hard-routed bits per element (higher is better)."""
        return -evaluate(self.bank_, self._merged(X)).bits_per_element


def gradient_check(y, bank, config, eps=1e-5, lam=None, temp=1.0, max_entries=None, seed=0):
    """Compare analytic gradients of the full loss with central differences.

    Rounding offsets are recorded once and replayed, so the perturbed
    losses stay on the same straight-through branch. Returns the largest
    relative error ``|a - n| / max(|a|, |n|, 1e-6)`` and per-parameter maxima.
    """
    tape = OffsetTape()
    distortion = make_distortion(config, np.shape(y)[-1])
    bank.store.zero_grad()
    terms = total_loss(y, bank, config, distortion=distortion, tape=tape, lam=lam, temp=temp)
    terms.L.backward()
    analytic = {k: v.copy() for k, v in bank.store.grads().items()}
    rng = np.random.default_rng(seed)

    def loss_at():
        tape.replay()
        return float(total_loss(y, bank, config, distortion=distortion, tape=tape, lam=lam, temp=temp).L.data)

    worst, per_param = 0.0, {}
    for name, p in bank.store.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_at()
            flat[i] = orig - eps
            down = loss_at()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            err = max(err, abs(a - num) / max(abs(a), abs(num), 1e-6))
        per_param[name] = err
        worst = max(worst, err)
    bank.store.zero_grad()
    return worst, per_param
