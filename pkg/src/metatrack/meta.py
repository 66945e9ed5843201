"""MAML for detectors: k-step inner gradient descent with kernel-wise learnable
rates, a multi-step outer loss and Adam over both the initial weights and
the rates.
"""

import collections
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import detector as det
from .autodiff import io as tio

PAPER_GAMMA = (0.05, 0.10, 0.2, 0.30, 0.35)
ALPHA_FLOOR = 1e-6

# counts of inner loops run with and without second-order graphs
instrumentation = collections.Counter()


@dataclass(frozen=True)
class MetaConfig:
    inner_steps: int = 4
    alpha_init: float = 1e-3
    gamma_final: tuple = ()
    outer_lr: float = 1e-4
    tasks_per_iteration: int = 8
    first_order_epochs: int = 0
    epochs: int = 1
    iterations_per_epoch: int = 100
    learn_lr: bool = True
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.alpha_init < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.tasks_per_iteration < 1 or self.epochs < 1 or self.iterations_per_epoch < 0:
            raise ValueError("tasks_per_iteration and epochs must be positive")
        if self.gamma_final:
            g = np.asarray(self.gamma_final, dtype=np.float64)
            if len(g) != self.inner_steps + 1:
                raise ValueError(f"gamma_final needs {self.inner_steps + 1} weights, got {len(g)}")
            if np.any(g < 0) or abs(g.sum() - 1) > 1e-9:
                raise ValueError("gamma_final must be non-negative and sum to 1")

    @property
    def final_gamma(self):
        if self.gamma_final:
            return np.asarray(self.gamma_final, dtype=np.float64)
        if self.inner_steps == 4:
            return np.asarray(PAPER_GAMMA)
        ramp = np.arange(1, self.inner_steps + 2, dtype=np.float64)
        return ramp / ramp.sum()


def gamma_schedule(epoch, config):
    """Per-step outer-loss weights: uniform at epoch 0, annealed linearly to
    ``config.final_gamma`` at the last epoch."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    k1 = config.inner_steps + 1
    start = np.full(k1, 1.0 / k1)
    t = epoch / (config.epochs - 1) if config.epochs > 1 else 0.0
    g = (1 - t) * start + t * config.final_gamma
    return g / g.sum()


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shapes):
        return cls({k: np.zeros(s) for k, s in shapes.items()}, {k: np.zeros(s) for k, s in shapes.items()})

    def update(self, values, grads, lr):
        """One Adam step; returns new values (same dtypes as ``values``)."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.step, 1 - b2 ** self.step
        out = {}
        for k, g in grads.items():
            if self.m[k].shape != g.shape:
                raise ValueError(f"Adam moment for {k!r} has shape {self.m[k].shape}, gradient {g.shape}")
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            step = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            x = values[k]
            out[k] = (x.astype(np.float64) - step).astype(x.dtype)
        return out

    def copy(self):
        return AdamState({k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()},
                         self.step, self.beta1, self.beta2, self.eps)


def adam_for(params, learn_lr=True):
    shapes = {f"w:{n}": p.weight.shape for n, p in params.entries.items() if p.trainable}
    if learn_lr:
        shapes.update({f"lr:{n}": p.lr.shape for n, p in params.entries.items() if p.trainable})
    return AdamState.zeros(shapes)


# -- inner loop --------------------------------------------------------------------------

@dataclass
class Batch:
    """Samples prepared for repeated evaluation: frozen features and stacked targets."""

    features: np.ndarray
    targets: det.LabelTargets
    size: int


def prepare(samples, params):
    config = params.config
    images = np.stack([np.asarray(img) for img, _ in samples])
    feats = det.frozen_features(images, params, config)
    targets = det.stack_targets([det.assign_labels(box, config) for _, box in samples], config.dtype)
    return Batch(feats, targets, len(samples))


def batch_loss(weights, batch, config):
    cls_map, reg_map = det.forward_features(batch.features, weights, config)
    return det.detection_loss(det.DetectorOutput(cls_map, reg_map), batch.targets, config)


def kernelwise(lr, shape):
    """Expand a per-output-kernel rate vector to a conv weight's shape."""
    if len(shape) == 4:
        return ad.broadcast_to(ad.reshape(lr, (shape[0], 1, 1, 1)), shape)
    return lr


def make_leaves(params, learn_lr=True):
    """Differentiable copies of the trainable weights and their rates."""
    weights = collections.OrderedDict(
        (n, ad.tensor(p.weight, p.weight.dtype, requires_grad=True))
        for n, p in params.entries.items() if p.trainable)
    lrs = collections.OrderedDict(
        (n, ad.tensor(p.lr, p.lr.dtype, requires_grad=learn_lr))
        for n, p in params.entries.items() if p.trainable)
    return weights, lrs


def adapt(weights, lrs, loss_fn, steps, create_graph):
    """Run ``steps`` of theta <- theta - alpha * grad(loss_fn(theta)).

    ``weights`` and ``lrs`` map names to nodes; conv weights take a rate per
    output kernel. Returns the trajectory [theta_0, ..., theta_steps] as
    dicts of nodes. With ``create_graph=False`` the inner gradients are
    constants, which is the first-order approximation; rates still receive
    gradients.
    """
    instrumentation["second_order" if create_graph else "first_order"] += 1
    names = list(lrs)
    trajectory = [weights]
    for j in range(steps):
        try:
            loss = loss_fn(weights)
            grads = ad.grad(loss, [weights[n] for n in names], create_graph=create_graph)
            new = collections.OrderedDict(weights)
            for n, g in zip(names, grads):
                new[n] = ad.sub(weights[n], ad.mul(kernelwise(lrs[n], weights[n].shape), g))
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"inner step {j}: {exc}") from exc
        trajectory.append(new)
        weights = new
    return trajectory


def detector_loss_fn(batch, config):
    return lambda weights: batch_loss(weights, batch, config)


def inner_gd(params, support, steps, track_graph=True, leaves=None):
    """Inner-level GD on a support set; returns [theta_0 .. theta_steps].

    Each element maps trainable entry names to nodes. With ``track_graph``
    every element is differentiable w.r.t. the leaves (weights and rates),
    which may be supplied via ``leaves=(weights, lrs)`` from :func:`make_leaves`.
    Frozen entries are never touched.
    """
    if steps < 1:
        raise ValueError("inner_gd needs at least one step")
    batch = support if isinstance(support, Batch) else prepare(support, params)
    if track_graph:
        weights, lrs = leaves if leaves is not None else make_leaves(params)
        return adapt(weights, lrs, detector_loss_fn(batch, params.config), steps, create_graph=True)
    trajectory = [det.weight_nodes(params, params.trainable_names())]
    current = params
    for j in range(steps):
        current = gd_steps(current, batch, 1, step_offset=j)
        trajectory.append(det.weight_nodes(current, current.trainable_names()))
    return trajectory


def gd_steps(params, samples, steps, lrs=None, step_offset=0):
    """Plain (graph-free) inner-loop GD; returns the adapted ParamSet.

    ``lrs`` overrides the rates stored in ``params``.
    """
    if steps == 0:
        return params
    batch = samples if isinstance(samples, Batch) else prepare(samples, params)
    config = params.config
    rates = lrs if lrs is not None else params.lrs()
    current = params
    for j in range(steps):
        weights, _ = make_leaves(current, learn_lr=False)
        try:
            loss = batch_loss(weights, batch, config)
            names = list(weights)
            grads = ad.grad(loss, [weights[n] for n in names])
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"inner step {j + step_offset}: {exc}") from exc
        new = {}
        for n, g in zip(names, grads):
            w = current[n].weight
            lr = rates[n].reshape(rates[n].shape + (1,) * (w.ndim - rates[n].ndim))
            new[n] = (w - lr * g.value).astype(w.dtype)
            if not np.all(np.isfinite(new[n])):
                raise ad.NonFiniteError(f"inner step {j + step_offset}: update of {n!r} is not finite")
        current = current.replace(weights=new)
    return current


def outer_loss(trajectory, target, gamma, params_or_config):
    """sum_k gamma_k * mean target-set loss at theta_k."""
    config = getattr(params_or_config, "config", params_or_config)
    gamma = np.asarray(gamma, dtype=np.float64)
    if len(gamma) != len(trajectory):
        raise ValueError(f"{len(gamma)} gamma weights for a trajectory of {len(trajectory)} parameter sets")
    if not isinstance(target, Batch):
        raise TypeError("target must be a prepared Batch (see prepare)")
    total = None
    for k, (g, weights) in enumerate(zip(gamma, trajectory)):
        if g == 0:
            continue
        term = ad.mul(batch_loss(weights, target, config), float(g))
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("all gamma weights are zero")
    return total


# -- outer loop -----------------------------------------------------------------------------

def task_gradients(params, task, config, gamma, second_order):
    """Outer loss of one task and its gradients w.r.t. weights and rates."""
    weights, lrs = make_leaves(params, config.learn_lr)
    support = prepare(task.support, params)
    target = prepare(task.target, params)
    trajectory = adapt(weights, lrs, detector_loss_fn(support, params.config), config.inner_steps,
                       second_order)
    loss = outer_loss(trajectory, target, gamma, params.config)
    wrt = list(weights.values()) + (list(lrs.values()) if config.learn_lr else [])
    grads = ad.grad(loss, wrt)
    out = {f"w:{n}": g.value for n, g in zip(weights, grads)}
    if config.learn_lr:
        out.update({f"lr:{n}": g.value for n, g in zip(lrs, grads[len(weights):])})
    return loss.item(), out


def meta_step(params, tasks, config, adam, epoch):
    """One outer-level Adam update from a batch of tasks.

    Returns (new params, adam, mean outer loss). Tasks are processed in order
    and their gradients averaged, so results do not depend on scheduling.
    """
    if not tasks:
        raise ValueError("meta_step needs at least one task")
    gamma = gamma_schedule(epoch, config)
    second_order = epoch >= config.first_order_epochs
    total = 0.0
    acc = None
    for i, task in enumerate(tasks):
        try:
            loss, grads = task_gradients(params, task, config, gamma, second_order)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"task {i}: {exc}") from exc
        if not math.isfinite(loss):
            raise ad.NonFiniteError(f"task {i}: outer loss is not finite")
        total += loss
        if acc is None:
            acc = {k: g.astype(np.float64) for k, g in grads.items()}
        else:
            for k, g in grads.items():
                acc[k] += g
    n = len(tasks)
    acc = {k: g / n for k, g in acc.items()}
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in acc.values()))
    if config.grad_clip and norm > config.grad_clip:
        acc = {k: g * (config.grad_clip / norm) for k, g in acc.items()}
    values = {f"w:{n_}": p.weight for n_, p in params.entries.items() if p.trainable}
    if config.learn_lr:
        values.update({f"lr:{n_}": p.lr for n_, p in params.entries.items() if p.trainable})
    updated = adam.update(values, acc, config.outer_lr)
    weights = {k[2:]: v for k, v in updated.items() if k.startswith("w:")}
    lrs = {k[3:]: np.maximum(v, ALPHA_FLOOR).astype(v.dtype) for k, v in updated.items() if k.startswith("lr:")}
    return params.replace(weights=weights, lrs=lrs), adam, total / n


@dataclass
class TrainLog:
    records: list = field(default_factory=list)  # (iteration, epoch, loss, wall_ms)

    def lines(self):
        return [f"{it}, {ep}, {loss!r}, {ms:.3f}" for it, ep, loss, ms in self.records]

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("".join(line + "\n" for line in self.lines()))


def iteration_rng(seed, iteration):
    return np.random.default_rng([int(seed), int(iteration)])


def draw_tasks(task_source, seed, iteration, count):
    rng = iteration_rng(seed, iteration)
    return [task_source(rng) for _ in range(count)]


def meta_train(det_config, config, task_source, seed, params=None, adam=None,
               start_iteration=0, on_epoch_end=None, log=None):
    """Meta-train a detector for ``epochs * iterations_per_epoch`` outer steps.

    ``task_source(rng)`` returns one Task; iteration ``i`` draws its tasks
    from an rng seeded by ``(seed, i)``, so resuming at ``start_iteration``
    replays the same stream. ``on_epoch_end(epoch, params, adam, iteration)``
    is called after each epoch (the checkpoint hook).
    """
    if params is None:
        params = det.init_params(det_config, seed=seed, alpha_init=config.alpha_init)
    if adam is None:
        adam = adam_for(params, config.learn_lr)
    log = log if log is not None else TrainLog()
    per_epoch = config.iterations_per_epoch
    total = config.epochs * per_epoch
    for it in range(start_iteration, total):
        epoch = it // per_epoch
        t0 = time.perf_counter()
        tasks = draw_tasks(task_source, seed, it, config.tasks_per_iteration)
        try:
            params, adam, loss = meta_step(params, tasks, config, adam, epoch)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"iteration {it}: {exc}") from exc
        log.records.append((it, epoch, loss, (time.perf_counter() - t0) * 1e3))
        if on_epoch_end is not None and (it + 1) % per_epoch == 0:
            on_epoch_end(epoch, params, adam, it + 1)
    return params, log


def train_baseline(det_config, task_source, seed, iterations, lr=1e-3, tasks_per_iteration=8,
                   params=None, log=None):
    """Standard single-level training: Adam on the detection loss of every
    labelled patch in the sampled tasks; no inner loop, rates untouched."""
    if params is None:
        params = det.init_params(det_config, seed=seed)
    adam = adam_for(params, learn_lr=False)
    log = log if log is not None else TrainLog()
    for it in range(iterations):
        t0 = time.perf_counter()
        tasks = draw_tasks(task_source, seed, it, tasks_per_iteration)
        samples = [s for task in tasks for s in task.support + task.target]
        weights, _ = make_leaves(params, learn_lr=False)
        loss = batch_loss(weights, prepare(samples, params), det_config)
        grads = ad.grad(loss, list(weights.values()))
        updated = adam.update({f"w:{n}": params[n].weight for n in weights},
                              {f"w:{n}": g.value.astype(np.float64) for n, g in zip(weights, grads)}, lr)
        params = params.replace(weights={k[2:]: v for k, v in updated.items()})
        log.records.append((it, 0, loss.item(), (time.perf_counter() - t0) * 1e3))
    return params, log


# -- sidecar optimizer state ----------------------------------------------------------------

ADAM_MAGIC = "MDADAM1"


def save_adam(path, adam):
    with open(path, "wb") as fh:
        header = [ADAM_MAGIC, f"step={adam.step}", f"beta1={adam.beta1!r}", f"beta2={adam.beta2!r}",
                  f"eps={adam.eps!r}", "end"]
        fh.write(("\n".join(header) + "\n").encode())
        fh.write(struct.pack("<I", len(adam.m)))
        for k in adam.m:
            raw = k.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            tio.write_tensor(fh, adam.m[k])
            tio.write_tensor(fh, adam.v[k])


def load_adam(path):
    with open(path, "rb") as fh:
        items = dict(det._read_text_block(fh, ADAM_MAGIC))
        (count,) = struct.unpack("<I", fh.read(4))
        m, v = {}, {}
        for _ in range(count):
            (length,) = struct.unpack("<I", fh.read(4))
            k = fh.read(length).decode()
            m[k] = tio.read_tensor(fh)
            v[k] = tio.read_tensor(fh)
    return AdamState(m, v, int(items["step"]), float(items["beta1"]), float(items["beta2"]), float(items["eps"]))
