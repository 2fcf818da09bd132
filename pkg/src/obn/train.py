"""SGD training with the orthogonality penalty folded into the objective.

The minimized objective is ``task_loss + lam * sum_bases penalty(basis)``.
Shared bases receive the gradient summed over every block that uses them
(aliasing takes care of this), and the optimizer keeps one momentum buffer per
distinct parameter object, so a shared basis is updated and decayed once per
step.
"""
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import augment as augment_batch
from .errors import ConfigError, DimensionError, NumericalError
from .models import spec_from_name
from .nn import Tape

CIFAR_MILESTONES = (0.5, 0.75)
IMAGENET_MILESTONES = (0.4, 0.667, 0.933)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    milestones: tuple = CIFAR_MILESTONES
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ortho_lambda: float = 1e-3
    seed: int = 0
    dtype: str = "float32"
    augment: bool = True

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.gamma <= 0:
            raise ConfigError("learning rate and decay factor must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.ortho_lambda < 0:
            raise ConfigError("momentum, weight decay and lambda must be non-negative")
        if list(self.milestones) != sorted(self.milestones) or any(not 0 < m < 1 for m in self.milestones):
            raise ConfigError(f"milestones must be sorted fractions in (0, 1), got {self.milestones}")


def lr_at(config, epoch):
    """Step schedule: multiply by ``gamma`` at each milestone fraction of the run."""
    passed = sum(epoch >= round(m * config.epochs) for m in config.milestones)
    return config.lr * config.gamma**passed


def derive_rng(seed, label):
    """Independent generator for one subsystem (``init``, ``data``, ``augment``...)."""
    return np.random.default_rng([seed, zlib.crc32(label.encode())])


def derive_seed(seed, label):
    return int(derive_rng(seed, label).integers(2**31))


class SGD:
    """Momentum SGD with L2 weight decay on parameters flagged ``decay``."""

    def __init__(self, params, momentum=0.9, weight_decay=5e-4):
        seen = set()
        self.params = []
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                self.params.append(p)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        lr = np.asarray(lr, dtype=self.params[0].data.dtype) if self.params else lr
        for p, buf in zip(self.params, self.buffers):
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= lr * buf

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def _first_nonfinite_layer(network, x):
    """Re-run the forward pass leaf by leaf and name the first layer emitting non-finite values."""
    hits = []
    originals = {}
    for name, mod in _named_leaves(network):
        fwd = mod.forward

        def checked(*args, _fwd=fwd, _name=name, **kw):
            out = _fwd(*args, **kw)
            if not hits and not np.all(np.isfinite(out)):
                hits.append(_name)
            return out

        originals[id(mod)] = (mod, fwd)
        object.__setattr__(mod, "forward", checked)
    try:
        network.forward(x, None)
    finally:
        for mod, _ in originals.values():
            object.__delattr__(mod, "forward")
    return hits[0] if hits else None


def _named_leaves(module, prefix=""):
    seen = set()

    def walk(mod, pre):
        kids = mod._modules
        if not kids and id(mod) not in seen:
            seen.add(id(mod))
            yield pre.rstrip("."), mod
        for name, child in kids.items():
            yield from walk(child, f"{pre}{name}.")

    yield from walk(module, prefix)


@dataclass
class Trainer:
    """Owns one network, its optimizer, and the seeded data-order/augmentation streams."""

    network: object
    config: TrainConfig
    hooks: list = field(default_factory=list)

    def __post_init__(self):
        self.optimizer = SGD(self.network.parameters(), self.config.momentum, self.config.weight_decay)
        self.data_rng = derive_rng(self.config.seed, "data")
        self.augment_rng = derive_rng(self.config.seed, "augment")
        self.epoch = 0
        self.iteration = 0

    def train_step(self, x, y, lr):
        net = self.network
        net.train()
        self.optimizer.zero_grad()
        loss, logits = net.loss_and_backward(x, y)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss} at iteration {self.iteration}",
                                 _first_nonfinite_layer(net, x))
        penalty = 0.0
        lam = self.config.ortho_lambda
        if lam:
            penalty = net.ortho_penalty()
            net.add_ortho_grad(lam)
        for hook in self.hooks:
            if hasattr(hook, "on_batch"):
                hook.on_batch(self.iteration, net)
        self.optimizer.step(lr)
        self.iteration += 1
        return loss, penalty, int(np.sum(logits.argmax(axis=1) != y))

    def train_epoch(self, dataset):
        """One shuffled pass over ``dataset``; returns averaged metrics."""
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        lr = lr_at(self.config, self.epoch)
        order = self.data_rng.permutation(len(dataset))
        total_loss = total_pen = 0.0
        wrong = 0
        for x, y in dataset.batches(self.config.batch_size, order):
            if self.config.augment:
                x = augment_batch(x, self.augment_rng)
            loss, pen, miss = self.train_step(x, y, lr)
            total_loss += loss * len(y)
            total_pen += pen * len(y)
            wrong += miss
        n = len(dataset)
        metrics = dict(epoch=self.epoch, lr=lr, train_loss=total_loss / n, train_error=100.0 * wrong / n,
                       ortho_penalty=self.network.ortho_penalty())
        for hook in self.hooks:
            if hasattr(hook, "on_epoch_end"):
                hook.on_epoch_end(self.epoch, self.network)
        self.epoch += 1
        return metrics

    def state_dict(self):
        return state_dict(self.network, self.optimizer, self.epoch, self.iteration,
                          {"data": self.data_rng, "augment": self.augment_rng})

    def load_state_dict(self, state):
        load_state_dict(self.network, state, self.optimizer)
        self.epoch = int(state["meta/epoch"][0])
        self.iteration = int(state["meta/iteration"][0])
        for label, rng in (("data", self.data_rng), ("augment", self.augment_rng)):
            set_rng_state(rng, state[f"rng/{label}"])


def evaluate(network, dataset, batch_size=500):
    """Top-1 error (percent) and mean loss in eval mode."""
    network.eval()
    wrong = 0
    total = 0.0
    for x, y in dataset.batches(batch_size):
        logits = network.forward(x)
        total += float(network.criterion.forward(logits, y)) * len(y)
        wrong += int(np.sum(logits.argmax(axis=1) != y))
    network.train()
    return {"error": 100.0 * wrong / len(dataset), "loss": total / len(dataset)}


# --- state ------------------------------------------------------------------------------


def rng_state(rng):
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators can be checkpointed")
    mask = (1 << 64) - 1
    s, inc = st["state"]["state"], st["state"]["inc"]
    return np.array([s >> 64, s & mask, inc >> 64, inc & mask, st["has_uint32"], st["uinteger"]],
                    dtype=np.uint64)


def set_rng_state(rng, arr):
    a = [int(v) for v in arr]
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (a[0] << 64) | a[1], "inc": (a[2] << 64) | a[3]},
        "has_uint32": a[4],
        "uinteger": a[5],
    }


def state_dict(network, optimizer=None, epoch=0, iteration=0, rngs=None):
    """Flat ``{name: array}`` of everything needed to resume bit-exactly."""
    out = {}
    for name, p in network.named_parameters():
        out[f"param/{name}"] = p.data
    for name, owner, key in network.named_buffers():
        out[f"buffer/{name}"] = getattr(owner, key)
    if optimizer is not None:
        index = {id(p): name for name, p in network.named_parameters()}
        for p, buf in zip(optimizer.params, optimizer.buffers):
            out[f"momentum/{index[id(p)]}"] = buf
    out["meta/epoch"] = np.array([epoch], dtype=np.int64)
    out["meta/iteration"] = np.array([iteration], dtype=np.int64)
    out["meta/model"] = _text(network.spec.name)
    out["meta/options"] = _text(json.dumps(network.spec.options(), sort_keys=True))
    for label, rng in (rngs or {}).items():
        out[f"rng/{label}"] = rng_state(rng)
    return out


def _text(s):
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def spec_from_state(state):
    """Rebuild the :class:`~obn.models.NetworkSpec` recorded in a state dict."""
    name = bytes(state["meta/model"]).decode("utf-8")
    opts = json.loads(bytes(state["meta/options"]).decode("utf-8")) if "meta/options" in state else {}
    return spec_from_name(name, **opts)


def load_state_dict(network, state, optimizer=None):
    """Copy arrays from ``state`` into the network (and optimizer), validating shapes."""
    targets = [(f"param/{n}", p.data) for n, p in network.named_parameters()]
    targets += [(f"buffer/{n}", getattr(o, k)) for n, o, k in network.named_buffers()]
    if optimizer is not None:
        index = {id(p): name for name, p in network.named_parameters()}
        targets += [(f"momentum/{index[id(p)]}", b) for p, b in zip(optimizer.params, optimizer.buffers)]
    for name, dst in targets:
        if name not in state:
            raise DimensionError(f"checkpoint has no entry {name!r}")
        src = state[name]
        if src.shape != dst.shape:
            raise DimensionError(f"shape mismatch for {name!r}: checkpoint {src.shape}, model {dst.shape}")
    for name, dst in targets:
        dst[...] = state[name]
