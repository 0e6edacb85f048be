"""Selective entropy model: a router picks one of ``n_e`` entropy models per
merged feature.

Training mixes all models with temperature-softmax weights; inference uses
the argmax and ships the chosen indices as side information.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .density import EntropyModel
from .errors import ConfigError, FormatError, InvalidArgumentError, TruncationError
from .features import ceil_log2
from .numerics import autodiff as ad
from .numerics.autodiff import Tensor
from .numerics.nets import ACTIVATION_CODES, ACTIVATION_NAMES, DenseNet, ParamStore
from .numerics.params_io import load_params, save_params

BANK_FORMAT = 1


@dataclass(frozen=True)
class RoutingDecision:
    scores: np.ndarray
    weights: np.ndarray
    hard_index: np.ndarray


class ModelBank:
    """``n_e`` entropy models sharing ``d_v``/``d_z`` plus the router network.

    All parameters live in one :class:`ParamStore`; model ``e`` uses the
    prefix ``model{e}`` and the router uses ``router``.
    """

    def __init__(self, d_v, n_e=16, d_z=None, seed=0, learn_gain=True):
        if n_e < 1:
            raise InvalidArgumentError("n_e must be >= 1")
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        self.d_v = d_v
        self.n_e = n_e
        self.models = [
            EntropyModel(self.store, f"model{e}", d_v, d_z, rng=rng, learn_gain=learn_gain) for e in range(n_e)
        ]
        self.d_z = self.models[0].d_z
        hidden = max(1, d_v // 8)
        self.router = DenseNet(self.store, "router", [d_v, hidden, n_e], ["relu", "identity"], rng=rng)
        # break the symmetry between models so the router has something to pick
        for e, m in enumerate(self.models):
            m.h_s.layers[-1].bias.data[d_v:] = 0.25 * (e - (n_e - 1) / 2.0) / max(1, n_e)

    def refresh(self):
        for m in self.models:
            m.refresh()

    @property
    def side_bits_per_feature(self):
        return ceil_log2(self.n_e)

    def route(self, y, dtype=np.float64):
        return route(self, y, dtype)

    # persistence ------------------------------------------------------------

    def _net_meta(self, net):
        return np.array([ACTIVATION_CODES[a] for a in net.activations], dtype=np.float32)

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        for e, m in enumerate(self.models):
            arrays = {k[len(m.prefix) + 1 :]: v for k, v in self.store.arrays(m.prefix + ".").items()}
            arrays["h_a.activations"] = self._net_meta(m.h_a)
            arrays["h_s.activations"] = self._net_meta(m.h_s)
            save_params(arrays, os.path.join(directory, f"model_{e:02d}.tfcp"))
        arrays = {k[len("router.") :]: v for k, v in self.store.arrays("router.").items()}
        arrays["activations"] = self._net_meta(self.router)
        save_params(arrays, os.path.join(directory, "router.tfcp"))
        meta = {
            "format": BANK_FORMAT,
            "d_v": self.d_v,
            "d_z": self.d_z,
            "n_e": self.n_e,
            "learn_gain": self.models[0].learn_gain,
            "models": [f"model_{e:02d}.tfcp" for e in range(self.n_e)],
            "router": "router.tfcp",
        }
        with open(os.path.join(directory, "bank.json"), "w") as fh:
            json.dump(meta, fh, indent=2)

    @classmethod
    def load(cls, directory):
        try:
            with open(os.path.join(directory, "bank.json")) as fh:
                meta = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"no bank.json in {directory!r}") from exc
        if meta.get("format") != BANK_FORMAT:
            raise ConfigError(f"unsupported bank format {meta.get('format')!r}")
        bank = cls(meta["d_v"], meta["n_e"], meta["d_z"], learn_gain=meta.get("learn_gain", True))
        for e, m in enumerate(bank.models):
            arrays = load_params(os.path.join(directory, meta["models"][e]))
            for net_name, net in (("h_a", m.h_a), ("h_s", m.h_s)):
                _apply_activations(net, arrays.pop(f"{net_name}.activations", None))
            bank.store.assign(arrays, prefix=m.prefix + ".")
        arrays = load_params(os.path.join(directory, meta["router"]))
        _apply_activations(bank.router, arrays.pop("activations", None))
        bank.store.assign(arrays, prefix="router.")
        bank.refresh()
        return bank


def _apply_activations(net, codes):
    if codes is None:
        return
    codes = [int(c) for c in np.asarray(codes).ravel()]
    if len(codes) != len(net.layers):
        raise ConfigError(f"activation list of length {len(codes)} for a {len(net.layers)}-layer net")
    for layer, c in zip(net.layers, codes):
        if c not in ACTIVATION_NAMES:
            raise ConfigError(f"unknown activation code {c}")
        layer.activation = ACTIVATION_NAMES[c]


def route(bank, y, dtype=np.float64):
    """Router scores, shape ``(..., n_e)``."""
    if isinstance(y, Tensor):
        return bank.router(y)
    y = np.asarray(y)
    if y.shape[-1] != bank.d_v:
        raise InvalidArgumentError(f"router expects d_v={bank.d_v}, got {y.shape[-1]}")
    return bank.router.forward(y, dtype=dtype)


def soft_weights(scores, temperature):
    """Temperature softmax over the last axis, max-subtracted for stability."""
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    raw = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    shift = raw.max(axis=-1, keepdims=True)
    e = ad.exp(ad.mul(ad.sub(scores, shift), 1.0 / temperature))
    return ad.div(e, ad.tsum(e, axis=-1, keepdims=True))


def hard_select(scores):
    """Argmax per feature; ties go to the lowest index."""
    return np.argmax(np.asarray(scores), axis=-1)


def routing_decision(scores, temperature):
    scores = np.asarray(scores, dtype=np.float64)
    return RoutingDecision(scores, soft_weights(scores, temperature), hard_select(scores))


def one_hot(index, n_e):
    index = np.asarray(index)
    return (index[..., None] == np.arange(n_e)).astype(np.float64)


def mixture_decode(decoded, weights):
    """``sum_e w[..., e] * decoded[e]``; ``decoded`` is a list of ``(..., d_v)``."""
    out = None
    for e, ybar in enumerate(decoded):
        term = ad.mul(ad.getitem(weights, (Ellipsis, slice(e, e + 1))), ybar)
        out = term if out is None else ad.add(out, term)
    return out


def mixture_rate(rates, weights, elements):
    """Router-weighted code length per element.

    ``rates[e]`` holds per-feature bits under model ``e`` (shape ``(...)``);
    ``elements`` is the element count ``n_p * n_c * d_v``.
    """
    total = None
    for e, r in enumerate(rates):
        term = ad.tsum(ad.mul(ad.getitem(weights, (Ellipsis, e)), r))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / elements)


def balance_loss(weights, alpha):
    """``alpha * sum_e (mean usage of e - 1/n_e)^2`` over every feature in the batch."""
    if alpha < 0:
        raise InvalidArgumentError("alpha must be >= 0")
    shape = np.shape(weights.data if isinstance(weights, Tensor) else weights)
    n_e = shape[-1]
    flat = ad.reshape(weights, (-1, n_e))
    usage = ad.mean(flat, axis=0)
    dev = ad.sub(usage, 1.0 / n_e)
    return ad.mul(ad.tsum(ad.mul(dev, dev)), alpha)


def side_info_bits(n_features, n_e):
    return n_features * ceil_log2(n_e)


def pack_side_info(hard_index, n_e):
    """Pack indices MSB-first at ``ceil(log2 n_e)`` bits each, zero-padded to a byte."""
    idx = np.asarray(hard_index, dtype=np.int64).ravel()
    width = ceil_log2(n_e)
    if idx.size and (idx.min() < 0 or idx.max() >= n_e):
        raise InvalidArgumentError(f"model index out of range for n_e={n_e}")
    if width == 0 or idx.size == 0:
        return b""
    bits = ((idx[:, None] >> np.arange(width - 1, -1, -1)) & 1).astype(np.uint8).ravel()
    return np.packbits(bits).tobytes()


def unpack_side_info(buf, count, n_e):
    """Inverse of :func:`pack_side_info`; the buffer length must match exactly."""
    width = ceil_log2(n_e)
    need = (count * width + 7) // 8
    if len(buf) < need:
        raise TruncationError(f"side info needs {need} bytes, got {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"side info has {len(buf) - need} bytes beyond the {need} expected", need)
    if width == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(bytes(buf[:need]), dtype=np.uint8))[: count * width]
    weights = 1 << np.arange(width - 1, -1, -1)
    idx = (bits.reshape(count, width).astype(np.int64) * weights).sum(axis=1)
    if idx.size and idx.max() >= n_e:
        raise InvalidArgumentError(f"side info names model {int(idx.max())} but n_e={n_e}")
    return idx
