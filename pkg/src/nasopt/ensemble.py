"""Dimension transfer and ensembling over pre-trained networks.

Two transfer protocols move a solved problem's network to a new
dimension: keep the body and retrain only a fresh head (nas1), or
rebuild everything from scratch (nas2).  Three ensemble schemes combine
K transferred members under tight evaluation cutoffs: solution
averaging (bagging), a trainable dense blend over concatenated member
solutions (stacking), and joint head training on the mean of member
objective values (hybrid).  Transfer experiments run at batch size 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import builder as nb
from . import trainer as tr

MANIFEST_SCHEMA = "nasopt-ensemble-manifest/v1"
SCHEMES = ("bagging", "stacking", "hybrid")


@dataclass
class EnsembleSpec:
    checkpoints: list
    scheme: str
    objective_id: str
    cutoff: int = 1000

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown ensemble scheme {self.scheme!r}")
        if not self.checkpoints:
            raise ValueError("an ensemble needs at least one member")


def save_manifest(spec, path):
    doc = {"schema": MANIFEST_SCHEMA, "checkpoints": list(spec.checkpoints),
           "scheme": spec.scheme, "objective": spec.objective_id,
           "cutoff": spec.cutoff}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_manifest(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"unknown manifest schema {doc.get('schema')!r}")
    return EnsembleSpec(doc["checkpoints"], doc["scheme"], doc["objective"],
                        doc.get("cutoff", 1000))


@dataclass
class EnsembleResult:
    report: tr.TrainReport
    members: list = field(default_factory=list)
    member_reports: list = field(default_factory=list)


def _transfer_train_cfg(cutoff, num_sol, adam=None):
    epochs = max(1, math.ceil(cutoff / num_sol))
    return tr.TrainConfig(max_epochs=epochs, adam=adam or ad.AdamConfig(),
                          eval_budget=cutoff, batch_size=1)


def transfer_nas1(network, objective, cutoff=1000, seed=0, batch=None):
    """Frozen-body transfer: swap and retrain only the dense head.

    ``network`` may be a checkpoint path or a built Network; the body is
    bit-preserved, the new head is sized to the target objective, and
    fine-tuning runs at batch size 1 under the evaluation cutoff.
    """
    if isinstance(network, (str, bytes)):
        network = nb.load_checkpoint(network)
    nb.freeze_body(network)
    nb.replace_head(network, objective.dim, objective.lo, objective.hi,
                    seed=seed)
    if batch is None:
        batch = nb.InputBatch(network.cfg.num_sol, network.cfg.input_size,
                              seed=seed)
    cfg = _transfer_train_cfg(cutoff, batch.num_sol)
    report = tr.train(network, objective, batch, cfg)
    return report, network


def transfer_nas2(genotype, objective, build_cfg, cutoff=1000, seed=0,
                  batch=None):
    """From-scratch control: same architecture, fresh weights, same cutoff."""
    cfg = nb.BuildConfig(
        dim=objective.dim, lo=objective.lo, hi=objective.hi,
        num_cells=build_cfg.num_cells, channels=build_cfg.channels,
        input_size=build_cfg.input_size, num_sol=build_cfg.num_sol)
    network = nb.build(genotype, cfg)
    nb.init_weights(network, seed=seed)
    if batch is None:
        batch = nb.InputBatch(cfg.num_sol, cfg.input_size, seed=seed)
    tcfg = _transfer_train_cfg(cutoff, batch.num_sol)
    report = tr.train(network, objective, batch, tcfg)
    return report, network


def _load_members(spec_or_networks, objective, seed):
    """Load members, freeze bodies, re-head them to the target dimension."""
    members = []
    for k, item in enumerate(spec_or_networks):
        net = nb.load_checkpoint(item) if isinstance(item, (str, bytes)) else item
        nb.freeze_body(net)
        nb.replace_head(net, objective.dim, objective.lo, objective.hi,
                        seed=np.random.SeedSequence([int(seed), 17, k])
                        .generate_state(1)[0])
        members.append(net)
    return members


def _member_batch(members, seed):
    cfg = members[0].cfg
    return nb.InputBatch(cfg.num_sol, cfg.input_size, seed=seed)


def bagging(members, objective, cutoff=1000, seed=0):
    """Fine-tune each member, then average their solution vectors.

    Every member gets its own cutoff-bounded head fine-tune; the
    averaged candidates are then evaluated over the whole input set and
    the best value across members and ensemble candidates is reported.
    """
    members = _load_members(members, objective, seed)
    batch = _member_batch(members, seed)
    reports = []
    for k, net in enumerate(members):
        cfg = _transfer_train_cfg(cutoff, batch.num_sol)
        reports.append(tr.train(net, objective, batch, cfg))

    f_best = min(r.f_best for r in reports)
    x_best = reports[int(np.argmin([r.f_best for r in reports]))].x_best
    evals = sum(r.evals for r in reports)

    sols = np.stack([nb.forward_solutions(net, batch.data)
                     for net in members])          # [K, NumSol, D]
    ensemble_sols = sols.mean(axis=0)
    vals = objective.value_batch(ensemble_sols)
    evals += ensemble_sols.shape[0]
    k = int(np.argmin(vals))
    if vals[k] < f_best:
        f_best = float(vals[k])
        x_best = ensemble_sols[k].copy()

    report = tr.TrainReport(
        x_best=x_best, f_best=float(f_best),
        f_first=reports[0].f_first, evals=evals,
        epochs_run=max(r.epochs_run for r in reports),
        loss_history=[], epoch_bests=[], epoch_evals=[],
        stop_reason="bagging")
    return EnsembleResult(report, members, reports)


def averaging_matrix(k, dim):
    """Blend weights that reproduce plain member averaging."""
    w = np.zeros((k * dim, dim))
    for i in range(k):
        w[i * dim:(i + 1) * dim, :] = np.eye(dim) / k
    return w


class StackedBlend:
    """One dense layer over concatenated member solutions, bounds-mapped."""

    def __init__(self, k, objective):
        self.k = k
        self.dim = objective.dim
        self.lo = objective.lo
        self.hi = objective.hi
        self.store = ad.ParamStore()
        self.store.add("blend_w", averaging_matrix(k, self.dim))
        self.store.add("blend_b", np.zeros(self.dim))

    def forward(self, member_solutions):
        """member_solutions: [K, b, D] -> bounded ensemble solutions node."""
        concat = np.concatenate(list(member_solutions), axis=1)   # [b, K*D]
        pre = ad.dense(ad.Value(concat), self.store.leaf("blend_w"),
                       self.store.leaf("blend_b"))
        return ad.scaled_tanh(pre, self.lo, self.hi)

    def pre_tanh(self, member_solutions):
        concat = np.concatenate(list(member_solutions), axis=1)
        return concat @ self.store.params["blend_w"] + self.store.params["blend_b"]


def stacking(members, objective, cutoff=1000, seed=0):
    """Train a dense blending layer over frozen members' solutions.

    The blend starts at the averaging matrix, so its pre-tanh output
    initially equals the bagging combination; the cutoff then buys Adam
    steps on the blend parameters only.
    """
    members = _load_members(members, objective, seed)
    batch = _member_batch(members, seed)
    blend = StackedBlend(len(members), objective)
    adam = ad.AdamConfig()

    state_best = np.inf
    x_best = None
    f_first = None
    evals = 0
    steps = 0
    num_sol = batch.num_sol
    while evals < cutoff:
        i0 = steps % num_sol
        sl = batch.slice(i0, i0 + 1)
        member_sols = [nb.forward_solutions(net, sl) for net in members]
        out = blend.forward(member_sols)
        vals = ad.apply_objective(out, objective)
        evals += 1
        if f_first is None:
            f_first = float(vals.data[0])
        if vals.data[0] < state_best:
            state_best = float(vals.data[0])
            x_best = out.data[0].copy()
        loss = ad.tensor_mean(vals)
        ad.backward(loss)
        ad.adam_step(blend.store, adam)
        steps += 1

    report = tr.TrainReport(
        x_best=x_best, f_best=float(state_best), f_first=f_first,
        evals=evals, epochs_run=steps // num_sol, loss_history=[],
        epoch_bests=[], epoch_evals=[], stop_reason="stacking")
    result = EnsembleResult(report, members, [])
    result.blend = blend
    return result


def hybrid(members, objective, cutoff=1000, seed=0):
    """Joint head training on the mean of per-member objective values.

    All member heads update together each step; with K members and batch
    size 1 every step costs K evaluations, so the scheme consumes K
    times the per-member cutoff.
    """
    members = _load_members(members, objective, seed)
    batch = _member_batch(members, seed)
    adam = ad.AdamConfig()
    k = len(members)
    budget = k * cutoff

    f_best = np.inf
    x_best = None
    f_first = None
    evals = 0
    steps = 0
    num_sol = batch.num_sol
    while evals + k <= budget:
        i0 = steps % num_sol
        sl = batch.slice(i0, i0 + 1)
        member_losses = []
        for net in members:
            out = net.forward(sl)
            vals = ad.apply_objective(out, objective)
            evals += 1
            if f_first is None:
                f_first = float(vals.data[0])
            if vals.data[0] < f_best:
                f_best = float(vals.data[0])
                x_best = out.data[0].copy()
            member_losses.append(ad.tensor_mean(vals))
        joint = float(np.sum([ml.data for ml in member_losses]) / k)
        for net, ml in zip(members, member_losses):
            ad.backward(ad.scale(ml, 1.0 / k))
            ad.adam_step(net.store, adam)
        steps += 1

    report = tr.TrainReport(
        x_best=x_best, f_best=float(f_best), f_first=f_first, evals=evals,
        epochs_run=steps // num_sol, loss_history=[joint] if steps else [],
        epoch_bests=[], epoch_evals=[], stop_reason="hybrid")
    return EnsembleResult(report, members, [])


def run_ensemble(spec, objective, seed=0):
    """Dispatch an :class:`EnsembleSpec` to its scheme."""
    if spec.scheme == "bagging":
        return bagging(spec.checkpoints, objective, spec.cutoff, seed)
    if spec.scheme == "stacking":
        return stacking(spec.checkpoints, objective, spec.cutoff, seed)
    return hybrid(spec.checkpoints, objective, spec.cutoff, seed)
