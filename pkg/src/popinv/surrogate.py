"""Lipschitz-capped MLP surrogates trained on a growing pair buffer.

The surrogate stands in for the forward map inside the inference loop. It
trains on the cumulative buffer of solver input/output pairs: a pretraining
batch drawn up front, then pairs acquired from the current input measure
while inference runs. Acquisition may be batched so the expensive solver is
called on blocks instead of single inputs.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable
from .errors import ContractViolation
from .optim import LrSchedule, OptimizerState

NORM_STD_FLOOR = 1e-8
BOUND_SLACK = 1e-12


class MlpSurrogate:
    """Fully connected net, gelu on hidden layers, identity output.

    Every weight matrix is kept under `lipschitz_bound` in the infinity
    operator norm (max over output units of the incoming absolute weight
    sum) by rescaling after each training step. Input and output
    normalization constants are applied inside `forward`, so callers always
    see the raw input/output spaces.
    """

    def __init__(self, in_dim, out_dim, width=100, depth=5, lipschitz_bound=10.0, rng=None):
        if depth < 1 or width < 1:
            raise ContractViolation("depth and width must be positive")
        if lipschitz_bound <= 0:
            raise ContractViolation("lipschitz bound must be positive")
        rng = np.random.default_rng(rng)
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.width = int(width)
        self.depth = int(depth)
        self.lipschitz_bound = float(lipschitz_bound)
        dims = [self.in_dim] + [self.width] * (self.depth - 1) + [self.out_dim]
        self.weights = []
        self.biases = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)
            self.weights.append(Variable(w, requires_grad=True, name=f"phi.w{i}"))
            self.biases.append(Variable(np.zeros(d_out), requires_grad=True, name=f"phi.b{i}"))
        self.in_mean = np.zeros(self.in_dim)
        self.in_std = np.ones(self.in_dim)
        self.out_mean = np.zeros(self.out_dim)
        self.out_std = np.ones(self.out_dim)
        self.project()

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"phi.w{i}"] = w
            out[f"phi.b{i}"] = b
        return out

    def set_normalization(self, inputs, outputs):
        inputs = np.asarray(inputs, dtype=np.float64)
        outputs = np.asarray(outputs, dtype=np.float64)
        self.in_mean = inputs.mean(axis=0)
        self.in_std = np.maximum(inputs.std(axis=0), NORM_STD_FLOOR)
        self.out_mean = outputs.mean(axis=0)
        self.out_std = np.maximum(outputs.std(axis=0), NORM_STD_FLOOR)

    def _chain(self, x):
        """Affine-gelu chain on an already normalized (n, in_dim) block."""
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < last:
                h = ad.gelu(h)
        return h

    def forward(self, z):
        z = ad.as_variable(z)
        if z.value.ndim != 2 or z.value.shape[1] != self.in_dim:
            raise ContractViolation(
                f"surrogate expects (n, {self.in_dim}) inputs, got {z.value.shape}"
            )
        x = ad.div(ad.sub(z, self.in_mean), self.in_std)
        h = self._chain(x)
        return ad.add(ad.mul(h, self.out_std), self.out_mean)

    def normalized_residual(self, z_block, u_block):
        """Mean squared error in normalized output space (the training loss)."""
        x = (np.asarray(z_block) - self.in_mean) / self.in_std
        target = (np.asarray(u_block) - self.out_mean) / self.out_std
        pred = self._chain(Variable(x))
        return ad.vmean(ad.power(ad.sub(pred, target), 2.0))

    def layer_norms(self):
        return [float(np.abs(w.value).sum(axis=0).max()) for w in self.weights]

    def project(self):
        for w in self.weights:
            norm = np.abs(w.value).sum(axis=0).max()
            if norm > self.lipschitz_bound:
                w.value = w.value * (self.lipschitz_bound / norm)

    def assert_within_bound(self):
        for i, norm in enumerate(self.layer_norms()):
            if norm > self.lipschitz_bound + BOUND_SLACK:
                raise ContractViolation(
                    f"layer {i} infinity norm {norm!r} exceeds bound {self.lipschitz_bound}"
                )

    def save(self, path):
        arrays = {}
        shapes = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"w{i}"] = w.value
            arrays[f"b{i}"] = b.value
            shapes.append(list(w.value.shape))
        arrays["in_mean"] = self.in_mean
        arrays["in_std"] = self.in_std
        arrays["out_mean"] = self.out_mean
        arrays["out_std"] = self.out_std
        np.savez(path, **arrays)
        manifest = {
            "format_version": 1,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "width": self.width,
            "depth": self.depth,
            "lipschitz_bound": self.lipschitz_bound,
            "layer_shapes": shapes,
        }
        with open(str(path) + ".manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(str(path) + ".manifest.json") as fh:
            manifest = json.load(fh)
        if manifest.get("format_version") != 1:
            raise ContractViolation(
                f"unsupported surrogate checkpoint version {manifest.get('format_version')!r}"
            )
        npz_path = path if str(path).endswith(".npz") else str(path) + ".npz"
        if not os.path.exists(npz_path):
            npz_path = path
        data = np.load(npz_path)
        net = cls(
            manifest["in_dim"],
            manifest["out_dim"],
            width=manifest["width"],
            depth=manifest["depth"],
            lipschitz_bound=manifest["lipschitz_bound"],
            rng=0,
        )
        for i in range(net.depth):
            net.weights[i].value = np.array(data[f"w{i}"])
            net.biases[i].value = np.array(data[f"b{i}"])
        net.in_mean = np.array(data["in_mean"])
        net.in_std = np.array(data["in_std"])
        net.out_mean = np.array(data["out_mean"])
        net.out_std = np.array(data["out_std"])
        return net


class ReplayBuffer:
    """Append-only store of (input, output) pairs with acquisition provenance.

    Pairs are never mutated or removed; `acquired_at` records the outer
    iteration whose input measure produced each pair (0 for pretraining).
    """

    def __init__(self, in_dim, out_dim, capacity=1024):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        cap = max(int(capacity), 1)
        self._z = np.empty((cap, self.in_dim))
        self._u = np.empty((cap, self.out_dim))
        self._step = np.empty(cap, dtype=np.int64)
        self.size = 0

    def __len__(self):
        return self.size

    def _ensure(self, extra):
        need = self.size + extra
        cap = self._z.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("_z", "_u", "_step"):
            old = getattr(self, name)
            grown = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
            grown[: self.size] = old[: self.size]
            setattr(self, name, grown)

    def append_batch(self, z_block, u_block, step):
        z_block = np.atleast_2d(np.asarray(z_block, dtype=np.float64))
        u_block = np.atleast_2d(np.asarray(u_block, dtype=np.float64))
        if z_block.shape[1] != self.in_dim or u_block.shape[1] != self.out_dim:
            raise ContractViolation("pair dimensions do not match the buffer")
        if z_block.shape[0] != u_block.shape[0]:
            raise ContractViolation("input and output batch sizes differ")
        n = z_block.shape[0]
        self._ensure(n)
        self._z[self.size : self.size + n] = z_block
        self._u[self.size : self.size + n] = u_block
        self._step[self.size : self.size + n] = int(step)
        self.size += n

    def inputs(self):
        return self._z[: self.size].copy()

    def outputs(self):
        return self._u[: self.size].copy()

    def acquired_at(self):
        return self._step[: self.size].copy()

    def sample_batch(self, n, rng):
        if self.size == 0:
            raise ContractViolation("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return self._z[idx].copy(), self._u[idx].copy()


def train_step(net, buffer, batch_size, opt, lr, rng):
    """One Adam step on a uniform with-replacement batch, then reprojection."""
    if len(buffer) == 0:
        raise ContractViolation("cannot train on an empty buffer")
    z_block, u_block = buffer.sample_batch(batch_size, rng)
    with Tape() as tape:
        loss = net.normalized_residual(z_block, u_block)
    grads = tape.backward(loss)
    named = {}
    for name, p in net.parameters().items():
        if p in grads and np.all(np.isfinite(grads[p])):
            named[name] = grads[p]
    if named:
        opt.apply(named, lr=lr)
    net.project()
    net.assert_within_bound()
    return float(loss.value)


class Algorithm2Config:
    def __init__(
        self,
        outer_steps,
        pretrain_steps,
        inner_steps,
        acquire_until,
        pretrain_pairs,
        batch_size,
        lr,
        lr_halvings=0,
        acquisition_batch=60,
    ):
        self.outer_steps = int(outer_steps)
        self.pretrain_steps = int(pretrain_steps)
        self.inner_steps = int(inner_steps)
        self.acquire_until = int(acquire_until)
        self.pretrain_pairs = int(pretrain_pairs)
        self.batch_size = int(batch_size)
        self.lr = float(lr)
        self.lr_halvings = int(lr_halvings)
        self.acquisition_batch = max(int(acquisition_batch), 1)
        if self.pretrain_pairs < 1:
            raise ContractViolation("need at least one pretraining pair")


def _acquire_clean(oracle_batch, z_block):
    """Run the solver on a block, dropping rows it flags as diverged."""
    u_block, diverged = oracle_batch(z_block)
    keep = np.asarray(diverged) < 0
    return z_block[keep], u_block[keep], int((~keep).sum())


def run_algorithm2_schedule(net, buffer, cfg, sample_inputs_now, oracle_batch, alpha_step, rng):
    """Interleave inference steps with surrogate acquisition and refinement.

    Per outer step: one inference update through the current surrogate,
    then (while acquisition is open) one input drawn from the just-updated
    measure and queued for a batched solver call, then `inner_steps`
    training updates. `sample_inputs_now(n)` must sample the current input
    measure without touching the inference RNG stream.

    Returns a dict with per-step surrogate losses, the acquisition log
    (step, input) and the dropped-pair count.
    """
    sched = LrSchedule(
        cfg.lr, cfg.lr_halvings, cfg.pretrain_steps + cfg.outer_steps * cfg.inner_steps
    )
    opt = OptimizerState(net.parameters(), sched)

    dropped = 0
    rounds = 0
    while len(buffer) < cfg.pretrain_pairs:
        need = cfg.pretrain_pairs - len(buffer)
        z_block, u_block, bad = _acquire_clean(oracle_batch, sample_inputs_now(need))
        dropped += bad
        if len(z_block):
            buffer.append_batch(z_block, u_block, step=0)
        rounds += 1
        if rounds > 50:
            raise ContractViolation("pretraining acquisition kept diverging")
    net.set_normalization(buffer.inputs(), buffer.outputs())

    phi_step = 0
    pretrain_losses = []
    for _ in range(cfg.pretrain_steps):
        pretrain_losses.append(
            train_step(net, buffer, cfg.batch_size, opt, sched.at(phi_step), rng)
        )
        phi_step += 1

    inner_losses = []
    acquisition_steps = []
    acquisition_inputs = []
    pending_steps = []
    pending_inputs = []

    def flush():
        nonlocal dropped
        if not pending_inputs:
            return
        z_block = np.vstack(pending_inputs)
        u_block, diverged = oracle_batch(z_block)
        keep = np.asarray(diverged) < 0
        dropped += int((~keep).sum())
        for row, step, ok in zip(range(len(pending_inputs)), pending_steps, keep):
            if ok:
                buffer.append_batch(z_block[row], u_block[row], step=step)
                acquisition_steps.append(step)
                acquisition_inputs.append(z_block[row])
        pending_steps.clear()
        pending_inputs.clear()

    for t in range(1, cfg.outer_steps + 1):
        alpha_step(t)
        if t < cfg.acquire_until:
            pending_steps.append(t)
            pending_inputs.append(np.atleast_2d(sample_inputs_now(1))[0])
            if len(pending_inputs) >= cfg.acquisition_batch or t == cfg.acquire_until - 1:
                flush()
        losses = []
        for _ in range(cfg.inner_steps):
            losses.append(train_step(net, buffer, cfg.batch_size, opt, sched.at(phi_step), rng))
            phi_step += 1
        inner_losses.append(losses[-1] if losses else np.nan)
    flush()

    return {
        "pretrain_losses": np.asarray(pretrain_losses),
        "surrogate_losses": np.asarray(inner_losses),
        "acquired_steps": np.asarray(acquisition_steps, dtype=np.int64),
        "acquired_inputs": (
            np.vstack(acquisition_inputs) if acquisition_inputs else np.empty((0, net.in_dim))
        ),
        "dropped_pairs": dropped,
    }
