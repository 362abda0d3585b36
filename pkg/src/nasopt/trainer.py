"""Training-as-optimization: drive a network's emitted solutions downhill.

One step: slice the fixed input set, forward to candidate solutions,
evaluate the objective on each (that is what the budget counts), form
the mean objective gap, push its gradient back through the network and
apply Adam.  An epoch is one full pass over the input set.  The budgeted
variant wraps the loop in geometrically growing epoch rungs with an
improvement test between rungs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class TrainConfig:
    """Knobs of one training run.

    ``psi`` enables the per-epoch improvement test when set; the plain
    loop runs to its other limits when it is None (the rung schedule of
    :func:`budgeted_train` applies the test at rung boundaries instead).
    """

    max_epochs: int = 200
    adam: ad.AdamConfig = field(default_factory=ad.AdamConfig)
    psi: float | None = None
    rung_epochs: int = 5
    growth: int = 3
    max_budget_epochs: int | None = None     # defaults to max_epochs
    fstar: float = 0.0
    eval_budget: int | None = None
    batch_size: int | None = None            # overrides the genotype's gene

    def __post_init__(self):
        if self.max_epochs < 1 or self.rung_epochs < 1 or self.growth < 2:
            raise ValueError("epochs >= 1, rung >= 1, growth >= 2 required")
        if self.psi is not None and self.psi < 0:
            raise ValueError("psi must be >= 0")
        iota = self.max_budget_epochs
        if iota is not None and not (self.rung_epochs <= iota <= self.max_epochs):
            raise ValueError("need rung_epochs <= max budget <= max_epochs")


@dataclass
class TrainReport:
    x_best: np.ndarray | None
    f_best: float
    f_first: float | None          # the very first objective value seen
    evals: int
    epochs_run: int
    loss_history: list
    epoch_bests: list
    epoch_evals: list
    stop_reason: str


class TrainAbort(ArithmeticError):
    """Numeric failure during training; carries the partial report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def early_stop_check(epoch_bests, psi):
    """True when the newest epoch improved too little over the previous.

    improvement = (prev - curr) / max(1, |prev|), compared against psi on
    epoch-level best values.
    """
    if len(epoch_bests) < 2:
        raise ValueError("need at least two epoch entries")
    prev, curr = epoch_bests[-2], epoch_bests[-1]
    return (prev - curr) / max(1.0, abs(prev)) < psi


class _RunState:
    def __init__(self):
        self.f_best = np.inf
        self.f_first = None
        self.x_best = None
        self.evals = 0
        self.epochs = 0
        self.loss_history = []
        self.epoch_bests = []
        self.epoch_evals = []


def _epoch_slices(num_sol, b):
    return [(i, min(i + b, num_sol)) for i in range(0, num_sol, b)]


def _report(state, reason):
    return TrainReport(
        x_best=None if state.x_best is None else state.x_best.copy(),
        f_best=float(state.f_best), f_first=state.f_first, evals=state.evals,
        epochs_run=state.epochs, loss_history=list(state.loss_history),
        epoch_bests=list(state.epoch_bests),
        epoch_evals=list(state.epoch_evals), stop_reason=reason)


def _run_epochs(network, objective, batch, cfg, n_epochs, state):
    """Advance training by up to n_epochs; returns a stop reason or None."""
    b = cfg.batch_size or network.genotype.batch_size
    slices = _epoch_slices(batch.num_sol, b)
    for _ in range(n_epochs):
        if cfg.eval_budget is not None and state.evals >= cfg.eval_budget:
            return "budget"
        losses = []
        exhausted = False

        def close_epoch():
            state.epochs += 1
            state.loss_history.append(float(np.mean(losses)) if losses else np.nan)
            state.epoch_bests.append(float(state.f_best))
            state.epoch_evals.append(state.evals)

        for i0, i1 in slices:
            if cfg.eval_budget is not None:
                room = cfg.eval_budget - state.evals
                if room <= 0:
                    exhausted = True
                    break
                i1 = min(i1, i0 + room)
            out = network.forward(batch.slice(i0, i1))
            vals = ad.apply_objective(out, objective)
            state.evals += i1 - i0
            if state.f_first is None:
                state.f_first = float(vals.data[0])
            if not np.all(np.isfinite(vals.data)):
                close_epoch()
                raise TrainAbort(
                    f"non-finite objective value at evals={state.evals}",
                    _report(state, "aborted"))
            k = int(np.argmin(vals.data))
            if vals.data[k] < state.f_best:
                state.f_best = float(vals.data[k])
                state.x_best = out.data[k].copy()
            loss = ad.add_const(ad.tensor_mean(vals), -cfg.fstar)
            losses.append(float(loss.data))
            ad.backward(loss)
            try:
                ad.adam_step(network.store, cfg.adam)
            except ad.NumericError as exc:
                close_epoch()
                raise TrainAbort(str(exc), _report(state, "aborted")) from exc
        close_epoch()
        if exhausted:
            return "budget"
        if cfg.psi is not None and len(state.epoch_bests) >= 2:
            if early_stop_check(state.epoch_bests, cfg.psi):
                return "early-stop"
    return None


def train(network, objective, batch, cfg=None):
    """Plain training loop up to max_epochs / eval budget / early stop."""
    cfg = cfg or TrainConfig()
    state = _RunState()
    reason = _run_epochs(network, objective, batch, cfg, cfg.max_epochs, state)
    return _report(state, reason or "max-epochs")


def rung_schedule(rung_epochs, growth, iota):
    """Cumulative epoch caps r, g*r, g^2*r, ... clipped at iota."""
    caps = []
    cap = rung_epochs
    while cap < iota:
        caps.append(cap)
        cap *= growth
    caps.append(iota)
    return caps


def budgeted_train(network, objective, batch, cfg=None):
    """Rung-scheduled training: grow the epoch budget while improving.

    Within a rung the loop runs uninterrupted; at each rung boundary the
    improvement since the previous boundary (the first epoch, for the
    first rung) must beat psi or training stops.  A capped eval budget
    still applies inside rungs.
    """
    cfg = cfg or TrainConfig()
    psi = cfg.psi if cfg.psi is not None else 0.01
    iota = cfg.max_budget_epochs or cfg.max_epochs
    caps = rung_schedule(cfg.rung_epochs, cfg.growth, iota)

    inner = TrainConfig(
        max_epochs=cfg.max_epochs, adam=cfg.adam, psi=None,
        rung_epochs=cfg.rung_epochs, growth=cfg.growth,
        max_budget_epochs=cfg.max_budget_epochs, fstar=cfg.fstar,
        eval_budget=cfg.eval_budget, batch_size=cfg.batch_size)

    state = _RunState()
    prev_mark = None
    for cap in caps:
        reason = _run_epochs(network, objective, batch, inner,
                             cap - state.epochs, state)
        if reason is not None:
            return _report(state, reason)
        if len(state.epoch_bests) >= 2:
            mark = state.epoch_bests[0] if prev_mark is None else prev_mark
            if early_stop_check([mark, state.epoch_bests[-1]], psi):
                return _report(state, "early-stop")
        prev_mark = state.epoch_bests[-1]
    return _report(state, "max-epochs")
