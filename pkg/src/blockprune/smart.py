"""SMART block pruner: soft top-k masks with an annealed temperature.

Training runs in three phases over one global epoch counter:

1. pretrain for ``s`` epochs on dense weights;
2. structural search for epochs ``s .. l-1``: every mini-batch forwards with
   ``w * f_tau(m)`` (``f`` from :mod:`blockprune.dtopk`, broadcast per block),
   updates both ``w`` and ``m`` and lowers ``tau`` along the schedule;
3. harden ``m`` to the exact top-k indicator and fine-tune ``w`` with the
   binary mask frozen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .blocks import BlockPartition, BlockSpec, block_reduce, expand_mask, partition
from .data import Dataset, batches, evaluate, n_batches
from .dtopk import soft_topk, topk_forward
from .training import TrainConfig, apply_hard_mask, masked_params, train_step

logger = logging.getLogger(__name__)

SCHEDULE_FAMILIES = ("linear", "exponential", "inverse_exponential", "fixed")
MASK_INITS = ("mean_abs", "l1", "ones")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TempSchedule:
    """Temperature as a function of the search-iteration index ``n``.

    ``fixed`` holds ``tau_start`` for the whole search (ablation only).
    ``si`` may be left ``None`` and resolved to the run's search length.
    """

    family: str = "exponential"
    #: 1.0 makes the "exponential" family a pure geometric decay tau = beta**n
    tau_start: float = 1.0
    tau_end: float = 1e-5
    si: Optional[int] = None

    def __post_init__(self):
        if self.family not in SCHEDULE_FAMILIES:
            raise ConfigError(f"unknown schedule family {self.family!r}")
        if not self.tau_start > 0:
            raise ConfigError("tau_start must be positive")
        if self.family != "fixed":
            if not self.tau_start > self.tau_end > 0:
                raise ConfigError(
                    f"need tau_start > tau_end > 0, got {self.tau_start}, {self.tau_end}"
                )
            if self.family == "exponential" and not self.tau_end - self.tau_start + 1 > 0:
                raise ConfigError("exponential schedule needs tau_end - tau_start + 1 > 0")
        if self.si is not None and self.si < 1:
            raise ConfigError("si must be >= 1")

    def value(self, n: int) -> float:
        return schedule_value(self, n)


def schedule_value(sched: TempSchedule, n: int) -> float:
    if n < 0:
        raise ValueError("iteration index must be non-negative")
    if sched.family == "fixed":
        return sched.tau_start
    if sched.si is None:
        raise ConfigError("schedule has no iteration count (si) resolved")
    ts, te, si = sched.tau_start, sched.tau_end, sched.si
    if n >= si:
        return te  # exact endpoint; the closed forms are off by an ulp here
    if sched.family == "linear":
        return ts - n * (ts - te) / si
    if sched.family == "exponential":
        beta = (te - ts + 1.0) ** (1.0 / si)
        return ts - 1.0 + beta**n
    beta = (1.0 + ts - te) ** (1.0 / si)
    return ts + 1.0 - beta**n


def compute_k(r: float, n_blocks: int) -> int:
    """Blocks kept: ``ceil((1 - r) * n_blocks)``.

    The product is rounded to 9 decimals first so that e.g. r=0.93,
    n=100 gives 7 rather than ceil(7.000000000000001) = 8.
    """
    if not 0 <= r <= 1:
        raise ValueError(f"sparsity must lie in [0, 1], got {r}")
    return int(math.ceil(round((1.0 - r) * n_blocks, 9)))


@dataclass
class MaskState:
    m: np.ndarray
    tau: float
    k: int
    t: float = math.nan
    iter: int = 0


def init_masks(part: BlockPartition, weights, mask_init: str, tau: float, k: int) -> MaskState:
    if mask_init == "ones":
        m = np.ones(part.n_blocks)
    elif mask_init in ("mean_abs", "l1"):
        m = block_reduce(part, weights, mask_init)
    else:
        raise ConfigError(f"unknown mask_init {mask_init!r}")
    return MaskState(m=m, tau=tau, k=k)


def harden(state: MaskState, k: Optional[int] = None) -> np.ndarray:
    """Binary mask with exactly ``k`` ones at the largest soft-mask values.

    Saturated soft values can tie; ties fall back to ``m`` and then to the
    lower block index.
    """
    k = state.k if k is None else k
    f = topk_forward(state.m, k, state.tau).f
    order = np.lexsort((np.arange(f.size), -state.m, -f))
    out = np.zeros(f.size)
    out[order[:k]] = 1.0
    return out


def fluctuation_diag(state: MaskState, weights, part: BlockPartition) -> np.ndarray:
    """Per block ``|w_hat_i| * min(1, |1 - 1/f_i|)``.

    This is the limiting change of a masked block as the temperature is
    driven to zero; it is large only when the block is neither near zero nor
    fully kept.
    """
    f = topk_forward(state.m, state.k, state.tau).f
    sq = np.zeros(part.n_blocks)
    for layer in part.layers:
        w = np.asarray(weights[layer.name]) * f[layer.index]
        sq += np.bincount(layer.index.ravel(), weights=(w * w).ravel(), minlength=part.n_blocks)
    norms = np.sqrt(sq)
    with np.errstate(divide="ignore"):
        factor = np.where(f > 0, np.minimum(1.0, np.abs(1.0 - 1.0 / np.where(f > 0, f, 1.0))), 1.0)
    return norms * factor


def convergence_bound(m, t: float, tau: float, s: int) -> np.ndarray:
    """``min((m_i + t*tau)^2, |(m_i + t*tau) / s|)`` per mask entry."""
    if s < 1:
        raise ValueError("iteration index s must be >= 1")
    shifted = np.asarray(m) + t * tau
    return np.minimum(shifted**2, np.abs(shifted / s))


def convergence_monitor(m_before, m_after, t: float, tau: float, s: int) -> dict:
    """Decay-condition check and mask drift for search iteration ``s``."""
    bound = convergence_bound(m_before, t, tau, s)
    satisfied = tau <= bound
    return {
        "monitor_frac": float(satisfied.mean()) if satisfied.size else 1.0,
        "drift": float(np.abs(np.asarray(m_after) - np.asarray(m_before)).sum()),
    }


@dataclass(frozen=True)
class SmartConfig:
    r: float = 0.5
    pretrain_epochs: int = 20
    search_end_epoch: int = 40
    finetune_epochs: int = 10
    schedule: TempSchedule = TempSchedule()
    mask_init: str = "mean_abs"
    weights_frozen: bool = False
    mask_type: str = "deterministic"
    block: BlockSpec = BlockSpec(16, 8)
    train: TrainConfig = TrainConfig()
    #: ``None`` means "same as the weight optimizer".  Weight decay on the
    #: mask defaults to off: it adds a constant pull on m every step, so the
    #: mask would never settle however small tau gets.
    mask_lr: Optional[float] = None
    mask_momentum: Optional[float] = None
    mask_weight_decay: Optional[float] = 0.0

    def __post_init__(self):
        if not 0 <= self.r <= 1:
            raise ConfigError(f"r must lie in [0, 1], got {self.r}")
        if not 0 <= self.pretrain_epochs <= self.search_end_epoch:
            raise ConfigError("need 0 <= pretrain_epochs (s) <= search_end_epoch (l)")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be non-negative")
        if self.mask_init not in MASK_INITS:
            raise ConfigError(f"unknown mask_init {self.mask_init!r}")
        if self.mask_type != "deterministic":
            raise ConfigError(
                f"mask type {self.mask_type!r} unsupported (deterministic probability masks only)"
            )

    @property
    def search_epochs(self) -> int:
        return self.search_end_epoch - self.pretrain_epochs

    @property
    def total_epochs(self) -> int:
        return self.search_end_epoch + self.finetune_epochs

    def mask_optimizer(self) -> ad.SGD:
        tr = self.train
        return ad.SGD(
            tr.lr if self.mask_lr is None else self.mask_lr,
            tr.momentum if self.mask_momentum is None else self.mask_momentum,
            tr.weight_decay if self.mask_weight_decay is None else self.mask_weight_decay,
        )

    def phase(self, epoch: int) -> str:
        if epoch < self.pretrain_epochs:
            return "pretrain"
        if epoch < self.search_end_epoch:
            return "search"
        return "finetune"


MASK_KEY = "__mask__"


def search_step(model, part: BlockPartition, batch, state: MaskState, cfg: SmartConfig,
                w_opt: ad.SGD, m_opt: ad.SGD) -> dict:
    """One structural-search mini-batch; updates ``model`` and ``state`` in place."""
    x, y = batch
    params = model.tensors(requires_grad=not cfg.weights_frozen)
    m = ad.Tensor(state.m, requires_grad=True)
    f, sol = soft_topk(m, state.k, state.tau)
    mult = {layer.name: ad.gather(f, layer.index) for layer in part.layers}
    graph = ad.Graph({**params, MASK_KEY: m})
    loss = graph.forward(
        lambda p, xb: ad.softmax_cross_entropy(
            model.forward(masked_params(model, p, mult), xb), y
        ),
        ad.Tensor(x),
    )
    value = float(loss.data)
    if not math.isfinite(value):
        raise FloatingPointError(
            f"non-finite loss {value} at search iteration {state.iter} "
            f"(tau={state.tau}, t={sol.t}, |m|max={np.abs(state.m).max()})"
        )
    grads = graph.backward()
    m_grad = grads.pop(MASK_KEY)
    if not cfg.weights_frozen:
        w_opt.step(model.params, grads)
    m_before = state.m.copy()
    m_opt.step({MASK_KEY: state.m}, {MASK_KEY: m_grad})
    record = {"iter": state.iter, "tau": state.tau, "t": sol.t, "loss": value}
    record.update(convergence_monitor(m_before, state.m, sol.t, state.tau, state.iter + 1))
    state.t = sol.t
    state.iter += 1
    state.tau = schedule_value(cfg.schedule, state.iter)
    return record


@dataclass
class SmartRun:
    """Everything needed to continue a run; also the returned result."""

    model: object
    partition: BlockPartition
    k: int
    w_opt: ad.SGD
    m_opt: ad.SGD
    step: int = 0
    mask: Optional[MaskState] = None
    hard_mask: Optional[np.ndarray] = None
    history: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    report: dict = field(default_factory=dict)
    finished: bool = False
    #: losses of the current, partially completed epoch
    epoch_losses: list = field(default_factory=list)


def resolve_schedule(cfg: SmartConfig, train: Dataset) -> SmartConfig:
    if cfg.schedule.si is not None:
        return cfg
    si = max(1, cfg.search_epochs * n_batches(train, cfg.train.batch_size))
    return replace(cfg, schedule=replace(cfg.schedule, si=si))


def start_smart(model, cfg: SmartConfig, part: Optional[BlockPartition] = None) -> SmartRun:
    if part is None:
        part = partition(model.weight_layers(), cfg.block, model.macs_per_element())
    return SmartRun(
        model=model,
        partition=part,
        k=compute_k(cfg.r, part.n_blocks),
        w_opt=cfg.train.optimizer(),
        m_opt=cfg.mask_optimizer(),
    )


def _enter_search(run: SmartRun, cfg: SmartConfig) -> None:
    run.mask = init_masks(
        run.partition, run.model.params, cfg.mask_init, schedule_value(cfg.schedule, 0), run.k
    )


def _enter_finetune(run: SmartRun, cfg: SmartConfig) -> None:
    if run.mask is None:
        _enter_search(run, cfg)
    run.hard_mask = harden(run.mask, run.k)
    apply_hard_mask(run.model, run.partition, run.hard_mask, run.w_opt)


def run_smart(
    model,
    train: Dataset,
    test: Dataset,
    cfg: SmartConfig,
    run: Optional[SmartRun] = None,
    stop_at: Optional[int] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> SmartRun:
    """Run (or continue) the three-phase SMART flow.

    ``stop_at`` halts after that many global mini-batch steps and returns an
    unfinished run that can be checkpointed and passed back as ``run``.
    """
    cfg = resolve_schedule(cfg, train)
    if run is None:
        run = start_smart(model, cfg)
    model = run.model
    bs, seed = cfg.train.batch_size, cfg.train.seed
    per_epoch = n_batches(train, bs)

    for epoch in range(cfg.total_epochs):
        if (epoch + 1) * per_epoch <= run.step:
            continue
        phase = cfg.phase(epoch)
        losses = run.epoch_losses
        for b, batch in enumerate(batches(train, bs, seed, epoch)):
            if epoch * per_epoch + b < run.step:
                continue
            if stop_at is not None and run.step >= stop_at:
                return run
            if phase == "search" and run.mask is None:
                _enter_search(run, cfg)
            if phase == "finetune" and run.hard_mask is None:
                _enter_finetune(run, cfg)
            if phase == "pretrain":
                loss = train_step(model, run.w_opt, *batch)
            elif phase == "search":
                rec = search_step(model, run.partition, batch, run.mask, cfg, run.w_opt, run.m_opt)
                run.diagnostics.append(rec)
                loss = rec["loss"]
            else:
                mult = expand_mask(run.partition, run.hard_mask)
                loss = train_step(model, run.w_opt, *batch, multipliers=mult)
            run.step += 1
            losses.append(loss)
        metrics = _epoch_metrics(run, test)
        metrics.update(epoch=epoch, phase=phase, train_loss=float(np.mean(losses)))
        run.epoch_losses = []
        run.history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
        logger.info("epoch %d [%s] %s", epoch, phase, metrics)

    if run.hard_mask is None:
        _enter_finetune(run, cfg)
    run.report = evaluate(model, test, run.hard_mask, run.partition)
    run.finished = True
    return run


def _epoch_metrics(run: SmartRun, test: Dataset) -> dict:
    if run.hard_mask is not None:
        return evaluate(run.model, test, run.hard_mask, run.partition)
    if run.mask is not None:
        f = topk_forward(run.mask.m, run.k, run.mask.tau).f
        out = evaluate(run.model, test, multipliers=expand_mask(run.partition, f))
        hard = evaluate(run.model, test, harden(run.mask, run.k), run.partition)
        out.update(hard_accuracy=hard["accuracy"], hard_loss=hard["loss"], tau=run.mask.tau)
        return out
    return evaluate(run.model, test)


def run_to_checkpoint(run: SmartRun, config_hash: str = "") -> tuple[dict, dict]:
    """Split a run into (tensors, metadata) for :func:`checkpoint.save_checkpoint`."""
    tensors = {f"param/{k}": v for k, v in run.model.params.items()}
    tensors.update({f"w_vel/{k}": v for k, v in run.w_opt.velocity.items()})
    meta = {
        "kind": "smart",
        "step": run.step,
        "k": run.k,
        "finished": run.finished,
        "history": run.history,
        "diagnostics": run.diagnostics,
        "report": run.report,
        "epoch_losses": run.epoch_losses,
        "partition": run.partition.describe(),
        "config_hash": config_hash,
        "model": model_descriptor(run.model),
    }
    if run.mask is not None:
        tensors["mask/m"] = run.mask.m
        if MASK_KEY in run.m_opt.velocity:
            tensors["mask/velocity"] = run.m_opt.velocity[MASK_KEY]
        meta.update(tau=run.mask.tau, t=run.mask.t, iter=run.mask.iter)
    if run.hard_mask is not None:
        tensors["mask/hard"] = run.hard_mask
    return tensors, meta


def model_descriptor(model) -> dict:
    spec = model.spec
    return {
        "architecture": spec.architecture,
        "input_shape": list(spec.input_shape),
        "channels": list(spec.channels),
        "hidden": spec.hidden,
        "classes": spec.classes,
        "prunable": list(model.prunable),
    }


def run_from_checkpoint(model, cfg: SmartConfig, tensors: dict, meta: dict,
                        config_hash: Optional[str] = None) -> SmartRun:
    """Rebuild a :class:`SmartRun` around ``model`` (whose params are overwritten)."""
    if config_hash is not None and meta.get("config_hash") != config_hash:
        raise ConfigError(
            f"checkpoint was written under config {meta.get('config_hash')!r}, "
            f"not {config_hash!r}"
        )
    run = start_smart(model, cfg)
    if run.partition.describe() != meta["partition"]:
        raise ConfigError("checkpoint block partition does not match the model/config")
    for name in model.params:
        model.params[name] = np.array(tensors[f"param/{name}"], dtype=np.float64)
    run.w_opt.velocity = {
        key[len("w_vel/"):]: np.array(v) for key, v in tensors.items() if key.startswith("w_vel/")
    }
    run.step, run.k, run.finished = meta["step"], meta["k"], meta["finished"]
    run.history, run.diagnostics, run.report = meta["history"], meta["diagnostics"], meta["report"]
    run.epoch_losses = list(meta.get("epoch_losses", []))
    if "mask/m" in tensors:
        run.mask = MaskState(np.array(tensors["mask/m"]), meta["tau"], run.k, meta["t"], meta["iter"])
        if "mask/velocity" in tensors:
            run.m_opt.velocity = {MASK_KEY: np.array(tensors["mask/velocity"])}
    if "mask/hard" in tensors:
        run.hard_mask = np.array(tensors["mask/hard"])
    return run
