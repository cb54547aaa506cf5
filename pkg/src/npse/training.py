"""Denoising score matching: dataset generation under a simulator-call
budget, the eps-matching loss with exact gradients, Adam, and an early-stopped
training loop with a frozen-noise validation split."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import score_net as sn
from .schedule import NoiseSchedule
from .score_net import NetworkConfig, ScoreNetwork
from .tasks import TaskModel

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DEFAULT_LR_GRID = (1e-3, 1e-4)


@dataclass(frozen=True)
class TrainingConfig:
    budget: int
    m_max: int = 1
    batch_size: int = 256
    lr: float = 1e-4
    max_epochs: int = 20_000
    patience: int = 100
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.budget < self.m_max:
            raise ValueError("budget must cover at least one example of m_max calls")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.m_max < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("m_max, batch_size and patience must be >= 1")


@dataclass(frozen=True)
class TrainingExample:
    n_set: int
    theta: np.ndarray       # working-space parameters
    xs: np.ndarray          # (n_set, x_dim)


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(step=0, m=np.zeros(n_params), v=np.zeros(n_params))


def generate_dataset(task: TaskModel, cfg: TrainingConfig,
                     rng: np.random.Generator,
                     chunk_calls: int = 1024) -> list[TrainingExample]:
    """Draw (n, theta, x_1..x_n) tuples until the next draw would exceed the
    simulator-call budget. Every simulator invocation counts, including draws
    rejected by the simulator; a rejection abandons its example."""
    if cfg.budget < 1:
        raise ValueError("budget must be >= 1")
    examples: list[TrainingExample] = []
    used = 0

    def run_planned(plan: list[tuple[int, np.ndarray]]) -> None:
        nonlocal used
        Z = np.stack([z for _, z in plan])
        curves, valid = task.trajectory_batch(Z)
        for (n, z), curve, ok in zip(plan, curves, valid):
            if not ok:
                used += 1  # the first call for this parameter was rejected
                continue
            xs = np.stack([task.observe(curve, rng) for _ in range(n)])
            used += n
            examples.append(TrainingExample(n_set=n, theta=z, xs=xs))

    while True:
        # plan a chunk of (n, z) draws against the worst-case call count
        plan: list[tuple[int, np.ndarray]] = []
        plan_used = used
        chunk = 0
        stop_n: int | None = None
        while chunk < chunk_calls:
            n = int(rng.integers(1, cfg.m_max + 1))
            if plan_used + n > cfg.budget:
                stop_n = n
                break
            plan.append((n, rng.standard_normal(task.theta_dim)))
            plan_used += n
            chunk += n
        if plan:
            run_planned(plan)
        if stop_n is None:
            continue
        # rejections may have freed budget; re-check the stopping draw
        if used + stop_n > cfg.budget:
            break
        run_planned([(stop_n, rng.standard_normal(task.theta_dim))])
    return examples


def _pack_batch(batch: list[TrainingExample]):
    thetas = np.stack([ex.theta for ex in batch])
    rows, seg, nset = sn.pack_sets([ex.xs for ex in batch])
    return thetas, rows, seg, nset


def _dsm_core(net: ScoreNetwork, packed, sch: NoiseSchedule, ts: np.ndarray,
              eps: np.ndarray, want_grad: bool):
    thetas, rows, seg, nset = packed
    g = sch.gamma[ts - 1]
    theta_t = np.sqrt(g)[:, None] * thetas + np.sqrt(1.0 - g)[:, None] * eps
    pred, cache = sn.forward_batch(net, theta_t, ts, rows, seg, nset, sch=sch,
                                   want_cache=want_grad)
    resid = pred - eps
    loss = float(np.mean(np.sum(resid ** 2, axis=1)))
    if not want_grad:
        return loss, None
    grads = sn.backward_batch(net, cache, (2.0 / len(thetas)) * resid)
    return loss, grads


def dsm_loss_frozen(net: ScoreNetwork, batch: list[TrainingExample],
                    sch: NoiseSchedule, ts: np.ndarray, eps: np.ndarray,
                    want_grad: bool = True):
    """eps-matching loss with fixed level and noise draws per example."""
    return _dsm_core(net, _pack_batch(batch), sch, ts, eps, want_grad)


class _PackedStore:
    """Whole-split packing so minibatch slicing avoids per-example work."""

    def __init__(self, examples: list[TrainingExample]):
        self.thetas, self.rows, self.seg, self.nset = _pack_batch(examples)
        self.uniform_single = bool((self.nset == 1).all())

    def batch(self, idx: np.ndarray):
        nset = self.nset[idx]
        if self.uniform_single:
            rows = self.rows[idx]
        else:
            rows = np.concatenate([self.rows[self.seg[i]:self.seg[i + 1]]
                                   for i in idx], axis=0)
        seg = np.zeros(len(idx) + 1, dtype=np.int64)
        np.cumsum(nset, out=seg[1:])
        return self.thetas[idx], rows, seg, nset


def dsm_loss(net: ScoreNetwork, batch: list[TrainingExample], sch: NoiseSchedule,
             rng: np.random.Generator):
    """Denoising score matching loss over a batch: per example draw
    t ~ U{1..T-1}, diffuse theta, regress predict_eps onto the injected
    noise. Returns (mean loss, exact gradient)."""
    if not batch:
        raise ValueError("batch must be nonempty")
    ts = rng.integers(1, sch.T, size=len(batch))
    eps = rng.standard_normal((len(batch), net.config.theta_dim))
    return dsm_loss_frozen(net, batch, sch, ts, eps, want_grad=True)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float) -> tuple[np.ndarray, AdamState]:
    """Standard bias-corrected Adam update; returns new params and state."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient/state shape mismatch")
    step = state.step + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads ** 2
    mhat = m / (1.0 - ADAM_BETA1 ** step)
    vhat = v / (1.0 - ADAM_BETA2 ** step)
    new_params = params - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return new_params, AdamState(step=step, m=m, v=v)


def _rng_streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return tuple(np.random.default_rng(s) for s in ss.spawn(5))


def train(task: TaskModel, cfg: TrainingConfig, sch: NoiseSchedule,
          net_cfg: NetworkConfig | None = None
          ) -> tuple[ScoreNetwork, list[dict]]:
    """Generate a dataset under the budget, then run minibatch Adam on the
    DSM loss with early stopping; returns the best-validation parameters and
    the per-epoch log."""
    data_rng = _rng_streams(cfg.seed)[0]
    dataset = generate_dataset(task, cfg, data_rng)
    return train_on_dataset(dataset, cfg, sch, theta_dim=task.theta_dim,
                            x_dim=task.x_dim, net_cfg=net_cfg)


def train_on_dataset(dataset: list[TrainingExample], cfg: TrainingConfig,
                     sch: NoiseSchedule, theta_dim: int | None = None,
                     x_dim: int | None = None,
                     net_cfg: NetworkConfig | None = None
                     ) -> tuple[ScoreNetwork, list[dict]]:
    """Training core on a fixed dataset; train(task, ...) with the same seed
    is equivalent because the data stream is drawn from the same substream."""
    _, split_rng, init_rng, loop_rng, val_rng = _rng_streams(cfg.seed)
    if net_cfg is None:
        if theta_dim is None or x_dim is None:
            theta_dim = dataset[0].theta.size
            x_dim = dataset[0].xs.shape[1]
        net_cfg = NetworkConfig(theta_dim=theta_dim, x_dim=x_dim, m_max=cfg.m_max)

    perm = split_rng.permutation(len(dataset))
    n_val = max(1, int(round(cfg.val_fraction * len(dataset))))
    n_train = len(dataset) - n_val
    if n_train < 1:
        raise ValueError("dataset too small for the requested validation fraction")
    train_set = [dataset[i] for i in perm[:n_train]]
    val_set = [dataset[i] for i in perm[n_train:]]
    net = sn.init_network(net_cfg, init_rng)
    ts_val = val_rng.integers(1, sch.T, size=len(val_set))
    eps_val = val_rng.standard_normal((len(val_set), net_cfg.theta_dim))

    train_store = _PackedStore(train_set)
    val_packed = _pack_batch(val_set)
    state = AdamState.zeros(net.params.size)
    best_val = np.inf
    best_params = net.params.copy()
    best_epoch = 0
    log: list[dict] = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = loop_rng.permutation(n_train)
        losses = []
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            ts = loop_rng.integers(1, sch.T, size=len(idx))
            eps = loop_rng.standard_normal((len(idx), net_cfg.theta_dim))
            loss, grads = _dsm_core(net, train_store.batch(idx), sch, ts, eps,
                                    want_grad=True)
            net.params, state = adam_step(net.params, grads, state, cfg.lr)
            losses.append(loss)
        val_loss, _ = _dsm_core(net, val_packed, sch, ts_val, eps_val,
                                want_grad=False)
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                    "val_loss": val_loss, "lr": cfg.lr})
        if val_loss < best_val:
            best_val = val_loss
            best_params = net.params.copy()
            best_epoch = epoch
        if epoch - best_epoch >= cfg.patience:
            break
    net.params = best_params
    return net, log


def train_lr_grid(task: TaskModel, cfg: TrainingConfig, sch: NoiseSchedule,
                  lrs: tuple[float, ...] = DEFAULT_LR_GRID,
                  net_cfg: NetworkConfig | None = None,
                  dataset: list[TrainingExample] | None = None):
    """Train once per learning rate on one dataset (same seed, hence same
    split/init/noise streams) and keep the run with the best validation loss."""
    if dataset is None:
        dataset = generate_dataset(task, cfg, _rng_streams(cfg.seed)[0])
    best = None
    for lr in lrs:
        net, log = train_on_dataset(dataset, replace(cfg, lr=lr), sch,
                                    theta_dim=task.theta_dim, x_dim=task.x_dim,
                                    net_cfg=net_cfg)
        val = min(rec["val_loss"] for rec in log)
        if best is None or val < best[0]:
            best = (val, net, log, lr)
    return best[1], best[2], best[3]
