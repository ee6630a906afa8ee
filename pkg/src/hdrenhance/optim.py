"""MSE loss, Adam, the training loop and inference."""

from __future__ import annotations

import csv
import logging
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import PairConfig, epoch_schedule, make_pair, pair_rng
from .network import UNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape}, target {target.shape}")
    diff = pred - target.astype(pred.dtype)
    return float(np.mean(np.square(diff, dtype=np.float64))), (2.0 / diff.size) * diff


@dataclass
class Adam:
    """Adam with bias correction; updates a parameter dict in place."""

    lr: float = 0.002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=p.dtype)
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_tensors(self):
        return {**{f"adam.m.{k}": v for k, v in self.m.items()},
                **{f"adam.v.{k}": v for k, v in self.v.items()}}

    def load_state_tensors(self, tensors, dtype=np.float32):
        for key, value in tensors.items():
            kind, name = key.split(".", 2)[1:]
            getattr(self, kind)[name] = np.array(value, dtype=dtype)


# --------------------------------------------------------------------------
# Pair sources


def to_nchw(batch):
    return np.ascontiguousarray(np.asarray(batch).transpose(0, 3, 1, 2))


class FixedPairs:
    """Pre-made (x, y) arrays shaped (n, h, w, 3)."""

    def __init__(self, x, y):
        if np.shape(x) != np.shape(y):
            raise ValueError("input and target arrays differ in shape")
        self.x, self.y = np.asarray(x), np.asarray(y)

    def __len__(self):
        return len(self.x)

    def batch(self, indices, epoch, iteration):
        return self.x[indices], self.y[indices]


class CorpusPairs:
    """Pairs drawn from HDR images; fresh random draws every epoch unless ``fresh`` is off."""

    def __init__(self, images, pair_config=PairConfig(), seed=0, fresh=True, jobs=1):
        self.images = list(images)
        self.pair_config = pair_config
        self.seed = seed
        self.fresh = fresh
        self.jobs = jobs

    def __len__(self):
        return len(self.images)

    def _one(self, key):
        index, seed = key
        return make_pair(self.images[index], pair_rng(*seed), self.pair_config)

    def batch(self, indices, epoch, iteration):
        if self.fresh:
            keys = [(i, (self.seed, epoch, iteration, slot)) for slot, i in enumerate(indices)]
        else:
            keys = [(i, (self.seed, i)) for i in indices]
        if self.jobs > 1:
            with ThreadPoolExecutor(self.jobs) as pool:
                pairs = list(pool.map(self._one, keys))
        else:
            pairs = [self._one(k) for k in keys]
        return np.stack([p.x for p in pairs]), np.stack([p.y for p in pairs])


def _prefetch(items, depth):
    """Run a generator on a worker thread with a bounded queue."""
    q = queue.Queue(maxsize=depth)
    done = object()

    def produce():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # re-raised on the consumer side
            q.put(exc)
        q.put(done)

    threading.Thread(target=produce, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    epochs: int = 5000
    batch: int = 8
    seed: int = 0
    lr: float = 0.002
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 1
    keep_last: int = 3
    out_dir: str | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be at least 1")


@dataclass
class TrainState:
    net: UNet
    optimizer: Adam
    history: list = field(default_factory=list)  # (iteration, epoch, loss)
    epoch: int = 0
    train_config: dict = field(default_factory=dict)  # as recorded in a resumed checkpoint


def _checkpoint(state, cfg, path):
    # out_dir and jobs are left out so that artifacts do not depend on where they were written
    tc = {k: v for k, v in asdict(cfg).items() if k not in ("out_dir", "jobs")}
    meta = {"epoch": state.epoch, "step": state.optimizer.t,
            "history": [list(h) for h in state.history], "train_config": tc}
    save_checkpoint(path, state.net, state.optimizer.state_tensors(), meta)


def resume_state(path):
    net, extra, meta = load_checkpoint(path)
    tc = meta.get("train_config", {})
    opt = Adam(tc.get("lr", 0.002), tc.get("beta1", 0.5), tc.get("beta2", 0.999),
               tc.get("adam_eps", 1e-8), t=meta["step"])
    opt.load_state_tensors(extra)
    history = [(int(i), int(e), float(l)) for i, e, l in meta["history"]]
    return TrainState(net, opt, history, meta["epoch"], tc)


def _batches(source, cfg, start_epoch):
    for epoch in range(start_epoch, cfg.epochs):
        schedule = epoch_schedule(len(source), cfg.batch, pair_rng(cfg.seed, epoch), epoch)
        for iteration, indices in enumerate(schedule.batches):
            x, y = source.batch(indices, epoch, iteration)
            yield epoch, iteration, len(schedule), x, y


def train(net, source, cfg=TrainConfig(), state=None, on_step=None):
    """Optimise ``net`` on batches from ``source``.

    Every epoch reshuffles the source (seeded by ``(seed, epoch)``) and runs
    ``len(source) // batch`` Adam steps on the MSE. Pass ``state`` from
    :func:`resume_state` to continue a checkpointed run.
    """
    if len(source) == 0:
        raise ValueError("training source is empty")
    if state is None:
        opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        state = TrainState(net, opt)
    net = state.net.train()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    saved = []
    best = np.inf
    batches = _batches(source, cfg, state.epoch)
    if cfg.jobs > 1:
        batches = _prefetch(batches, depth=2)
    for epoch, iteration, per_epoch, x, y in batches:
        pred = net.forward(to_nchw(x))
        loss, grad = mse_loss(pred, to_nchw(y))
        grads, _ = net.backward(grad)
        state.optimizer.step(net.params, grads)
        state.history.append((epoch * per_epoch + iteration, epoch, loss))
        if on_step is not None:
            on_step(state)
        if iteration == per_epoch - 1:
            state.epoch = epoch + 1
            if out_dir and (state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs):
                path = out_dir / f"ckpt_epoch{state.epoch:05d}.bin"
                _checkpoint(state, cfg, path)
                saved.append(path)
                while len(saved) > cfg.keep_last:
                    saved.pop(0).unlink(missing_ok=True)
                epoch_loss = np.mean([h[2] for h in state.history[-per_epoch:]])
                if epoch_loss < best:
                    best = epoch_loss
                    _checkpoint(state, cfg, out_dir / "best.bin")
    if out_dir:
        write_loss_csv(out_dir / "loss.csv", state.history)
    return state


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "epoch", "loss"])
        for iteration, epoch, loss in history:
            writer.writerow([iteration, epoch, repr(float(loss))])


def read_loss_csv(path):
    with open(path, newline="") as fh:
        return [(int(r["iteration"]), int(r["epoch"]), float(r["loss"])) for r in csv.DictReader(fh)]


def enhance(net, img):
    """Run the network on one ``(h, w, 3)`` LDR image of any size.

    The image is reflect-padded up to the network's size multiple and the
    output cropped back.
    """
    img = np.asarray(img, dtype=np.float32)
    height, width = img.shape[:2]
    mult = net.config.multiple
    pad_h, pad_w = -height % mult, -width % mult
    padded = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect") if pad_h or pad_w else img
    was_training = net.training
    net.eval()
    try:
        out = net.forward(to_nchw(padded[None]))
    finally:
        net.training = was_training
    return np.ascontiguousarray(out[0].transpose(1, 2, 0)[:height, :width]).astype(np.float32)
