"""Feature encoder, identity classifiers, paired networks, and the
temporal-average (EMA) parameter recurrence."""

import json
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, add, matmul, row_softmax, tanh
from .errors import ConfigError, ShapeError


@dataclass
class EncoderParams:
    """Two-layer MLP: input_dim -> hidden_dim (tanh) -> feature_dim."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def input_dim(self):
        return self.w1.data.shape[0]

    @property
    def feature_dim(self):
        return self.w2.data.shape[1]

    def copy(self, requires_grad=False):
        return EncoderParams(*[Tensor(t.data, requires_grad=requires_grad) for t in self.tensors()])


@dataclass
class ClassifierParams:
    w: Tensor
    b: Tensor

    def tensors(self):
        return [self.w, self.b]

    @property
    def num_classes(self):
        return self.w.data.shape[1]

    def copy(self, requires_grad=False):
        return ClassifierParams(*[Tensor(t.data, requires_grad=requires_grad) for t in self.tensors()])


@dataclass
class Network:
    encoder: EncoderParams
    classifier: ClassifierParams

    def tensors(self):
        return self.encoder.tensors() + self.classifier.tensors()

    def copy(self, requires_grad=False):
        return Network(self.encoder.copy(requires_grad), self.classifier.copy(requires_grad))


@dataclass
class NetworkPair:
    """Two collaboratively trained networks plus their temporal averages.

    avg1/avg2 carry requires_grad=False tensors and are only ever replaced
    wholesale by ``ema_update``; no gradient or optimizer state touches them.
    """

    net1: Network
    net2: Network
    avg1: Network
    avg2: Network
    iteration: int = 0


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(input_dim, hidden_dim, feature_dim, rng, requires_grad=True):
    return EncoderParams(
        w1=Tensor(_uniform_init(rng, input_dim, (input_dim, hidden_dim)), requires_grad),
        b1=Tensor(np.zeros(hidden_dim), requires_grad),
        w2=Tensor(_uniform_init(rng, hidden_dim, (hidden_dim, feature_dim)), requires_grad),
        b2=Tensor(np.zeros(feature_dim), requires_grad),
    )


def init_classifier(feature_dim, num_classes, rng, requires_grad=True):
    return ClassifierParams(
        w=Tensor(_uniform_init(rng, feature_dim, (feature_dim, num_classes)), requires_grad),
        b=Tensor(np.zeros(num_classes), requires_grad),
    )


def encode(x, enc):
    """Forward the encoder: tanh hidden layer, linear output features."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    hidden = tanh(add(matmul(x, enc.w1), enc.b1))
    return add(matmul(hidden, enc.w2), enc.b2)


def classify(features, cls):
    """Row-stochastic class probabilities from features."""
    f = features if isinstance(features, Tensor) else Tensor(features)
    return row_softmax(add(matmul(f, cls.w), cls.b))


def ema_update(avg_prev, current, alpha):
    """One step of the temporal-average recurrence:
    new = alpha * avg_prev + (1 - alpha) * current.

    Accepts parameter containers (Network/EncoderParams/ClassifierParams),
    Tensors, or arrays; returns the same kind with gradients untracked.
    Inputs are left unmodified.
    """
    if not (0.0 <= alpha < 1.0):
        raise ConfigError(f"ema momentum must lie in [0, 1), got {alpha}")
    if isinstance(avg_prev, Network):
        return Network(
            ema_update(avg_prev.encoder, current.encoder, alpha),
            ema_update(avg_prev.classifier, current.classifier, alpha),
        )
    if isinstance(avg_prev, (EncoderParams, ClassifierParams)):
        blended = [ema_update(a, c, alpha) for a, c in zip(avg_prev.tensors(), current.tensors())]
        return type(avg_prev)(*blended)
    a = avg_prev.data if isinstance(avg_prev, Tensor) else np.asarray(avg_prev, dtype=np.float64)
    c = current.data if isinstance(current, Tensor) else np.asarray(current, dtype=np.float64)
    if a.shape != c.shape:
        raise ShapeError(f"ema_update: shape mismatch {a.shape} vs {c.shape}")
    return Tensor(alpha * a + (1.0 - alpha) * c)


def init_pair(config, seed1, seed2, num_classes):
    """Build two independently initialized networks; averages start equal
    to their networks (the recurrence's T=0 state)."""
    if seed1 == seed2:
        raise ConfigError("init_pair: the two networks need distinct seeds")
    nets = []
    for seed in (seed1, seed2):
        rng = np.random.default_rng(seed)
        enc = init_encoder(config.data.input_dim, config.hidden_dim, config.feature_dim, rng)
        cls = init_classifier(config.feature_dim, num_classes, rng)
        nets.append(Network(enc, cls))
    net1, net2 = nets
    return NetworkPair(net1, net2, net1.copy(), net2.copy(), iteration=0)


def reset_classifiers(pair, num_classes, rng1, rng2):
    """Fresh classifier heads on all four models; average heads start equal
    to their networks'. Used when pseudo-class indices are regenerated."""
    feature_dim = pair.net1.encoder.feature_dim
    pair.net1.classifier = init_classifier(feature_dim, num_classes, rng1)
    pair.net2.classifier = init_classifier(feature_dim, num_classes, rng2)
    pair.avg1.classifier = pair.net1.classifier.copy()
    pair.avg2.classifier = pair.net2.classifier.copy()


def _network_to_flat(net):
    return np.concatenate([t.data.reshape(-1) for t in net.tensors()]).tolist()


def _network_from_flat(flat, input_dim, hidden_dim, feature_dim, num_classes, requires_grad):
    shapes = [
        (input_dim, hidden_dim),
        (hidden_dim,),
        (hidden_dim, feature_dim),
        (feature_dim,),
        (feature_dim, num_classes),
        (num_classes,),
    ]
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != sum(int(np.prod(s)) for s in shapes):
        raise ShapeError("checkpoint parameter count does not match architecture")
    parts, offset = [], 0
    for s in shapes:
        n = int(np.prod(s))
        parts.append(Tensor(flat[offset : offset + n].reshape(s), requires_grad=requires_grad))
        offset += n
    return Network(EncoderParams(*parts[:4]), ClassifierParams(*parts[4:]))


def save_checkpoint(path, pair, config_flat):
    """Checkpoint = architecture descriptor + flat parameter arrays for all
    four models + iteration counter + resolved-config echo."""
    arch = {
        "input_dim": pair.net1.encoder.input_dim,
        "hidden_dim": pair.net1.encoder.w1.data.shape[1],
        "feature_dim": pair.net1.encoder.feature_dim,
        "num_classes": pair.net1.classifier.num_classes,
    }
    payload = {
        "format": "mmt-checkpoint-v1",
        "architecture": arch,
        "iteration": pair.iteration,
        "networks": {
            "net1": _network_to_flat(pair.net1),
            "net2": _network_to_flat(pair.net2),
            "avg1": _network_to_flat(pair.avg1),
            "avg2": _network_to_flat(pair.avg2),
        },
        "config": config_flat,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path):
    """Returns (NetworkPair, config echo dict)."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "mmt-checkpoint-v1":
        raise ConfigError(f"{path}: not a recognized checkpoint file")
    arch = payload["architecture"]
    dims = (arch["input_dim"], arch["hidden_dim"], arch["feature_dim"], arch["num_classes"])
    nets = {
        name: _network_from_flat(flat, *dims, requires_grad=name.startswith("net"))
        for name, flat in payload["networks"].items()
    }
    pair = NetworkPair(nets["net1"], nets["net2"], nets["avg1"], nets["avg2"], payload["iteration"])
    return pair, payload.get("config", {})
