"""Generic propose/evaluate/update search over the cell space.

Three interchangeable proposal rules share one loop: uniform random
draws, a REINFORCE-trained recurrent controller, and a surrogate-guided
perturbation sampler (random warm-up, then cubic-RBF ranking of 10,000
weighted mutations of the incumbent).  Proposals whose canonical graph
key was already evaluated are charged nothing, and invalid genotypes are
charged only their penalty sentinel, so objective evaluations are spent
on genuinely new architectures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import builder as nb
from . import controller as ctl
from . import genotype as gt
from . import surrogate as su
from . import trainer as tr

# invalid genotypes never train; their recorded cost dominates any
# trained cost by construction
PENALTY_SENTINEL = 1e12

MAC_TRIALS = 10_000
MAC_BASE_MUTATION = 0.005
MAC_WEIGHT_SCALE = 2.0
RL_BATCH = 8

SEARCH_LOG_SCHEMA = "nasopt-search-log/v1"
SEARCH_LOG_FIELDS = ("iter", "strategy", "genotype", "canonical_key", "cost",
                     "evals_spent", "cum_evals", "best_cost")


class SearchConfigError(ValueError):
    pass


def derive_seed(*parts):
    """Deterministic 32-bit child seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class SearchRecord:
    iteration: int
    strategy: str
    genotype: gt.Genotype
    canonical_key: str
    cost: float
    evals_spent: int
    cum_evals: int
    best_cost: float
    rung_reached: int = 0

    def csv_row(self):
        return {
            "iter": self.iteration, "strategy": self.strategy,
            "genotype": self.genotype.to_text(),
            "canonical_key": self.canonical_key,
            "cost": repr(float(self.cost)),
            "evals_spent": self.evals_spent, "cum_evals": self.cum_evals,
            "best_cost": repr(float(self.best_cost)),
        }


@dataclass
class SearchHistory:
    records: list = field(default_factory=list)
    trained_costs: dict = field(default_factory=dict)   # canonical key -> cost
    seen_keys: set = field(default_factory=set)
    cum_evals: int = 0
    best_cost: float = np.inf
    best_genotype: gt.Genotype | None = None
    first_eval_cost: float | None = None

    def add(self, record, trained):
        self.records.append(record)
        self.seen_keys.add(record.canonical_key)
        self.cum_evals += record.evals_spent
        if trained:
            self.trained_costs[record.canonical_key] = record.cost
        if record.cost < self.best_cost:
            self.best_cost = record.cost
            self.best_genotype = record.genotype
        record.cum_evals = self.cum_evals
        record.best_cost = self.best_cost

    def trained_records(self):
        keys = set()
        out = []
        for r in self.records:
            if r.evals_spent > 0 and r.canonical_key not in keys:
                keys.add(r.canonical_key)
                out.append(r)
        return out


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------

class RandomStrategy:
    """Independent uniform draws; the update step is a no-op."""

    name = "random"

    def __init__(self, seed, num_nodes=gt.NUM_NODES):
        self.rng = np.random.default_rng([int(seed), 101])
        self.num_nodes = num_nodes

    def propose(self, history, budget):
        return [gt.sample_uniform(self.rng, self.num_nodes)]

    def update(self, history, results):
        pass


class RlStrategy:
    """Controller-sampled batches trained with baseline-subtracted rewards."""

    name = "rl"

    def __init__(self, seed, num_nodes=gt.NUM_NODES, batch=RL_BATCH):
        self.rng = np.random.default_rng([int(seed), 202])
        self.controller = ctl.RnnController(
            ctl.genotype_segments(num_nodes), seed=derive_seed(seed, 203))
        self.num_nodes = num_nodes
        self.batch = batch
        self._pending_tokens = []

    def propose(self, history, budget):
        self._pending_tokens = []
        out = []
        for _ in range(self.batch):
            tokens, _ = self.controller.sample(self.rng)
            self._pending_tokens.append(tokens)
            out.append(self.controller.tokens_to_genotype(tokens,
                                                          self.num_nodes))
        return out

    def update(self, history, results):
        episodes = [
            (tokens, ctl.reward_from_cost(rec.cost))
            for tokens, rec in zip(self._pending_tokens, results)
        ]
        if episodes:
            self.controller.update(episodes)


class MacStrategy:
    """Random warm-up, then surrogate-ranked weighted perturbations."""

    name = "mac"

    def __init__(self, seed, num_nodes=gt.NUM_NODES, trials=MAC_TRIALS):
        self.rng = np.random.default_rng([int(seed), 303])
        self.num_nodes = num_nodes
        self.trials = trials
        self.weights = None

    def propose(self, history, budget):
        if history.cum_evals * 2 < budget:        # warm-up half
            return [gt.sample_uniform(self.rng, self.num_nodes)]
        g = self._surrogate_proposal(history)
        return [g if g is not None
                else gt.sample_uniform(self.rng, self.num_nodes)]

    def update(self, history, results):
        pass

    def _surrogate_proposal(self, history):
        trained = history.trained_records()
        if history.best_genotype is None:
            return None
        vectors = np.array([su.genotype_vector(r.genotype) for r in trained])
        costs = np.array([r.cost for r in trained])
        try:
            model = su.fit_surrogate(vectors, costs)
        except su.SurrogateUnavailable:
            return None
        if len(trained) >= 4:
            self.weights = su.update_feature_weights(vectors, costs)
        d = vectors.shape[1]
        weights = self.weights if self.weights is not None else np.full(d, 1.0 / d)

        trials = self.mutate_batch(history.best_genotype, weights, self.trials)
        valid = [g for g in trials
                 if gt.validate(gt.decode(g)).is_valid]
        if not valid:
            return None
        preds = model.predict(np.array([su.genotype_vector(g) for g in valid]))
        for idx in np.argsort(preds, kind="stable"):
            g = valid[int(idx)]
            if gt.canonical_form(gt.decode(g)) not in history.seen_keys:
                return g
        return None

    def mutate_batch(self, base, weights, count):
        """Perturb the incumbent with per-gene probability eps + scale*w."""
        v = base.num_nodes
        ne = v * (v - 1) // 2
        nop = v - 2
        genes = np.array(list(base.edge_bits) + list(base.op_codes)
                         + [base.batch_code])
        p = np.clip(MAC_BASE_MUTATION + MAC_WEIGHT_SCALE * weights, 0.0, 1.0)
        mask = self.rng.random((count, genes.size)) < p
        pool = np.tile(genes, (count, 1))
        flip = mask[:, :ne]
        pool[:, :ne] = np.where(flip, 1 - pool[:, :ne], pool[:, :ne])
        shift = self.rng.integers(1, 3, size=(count, nop))
        opslice = pool[:, ne:ne + nop]
        pool[:, ne:ne + nop] = np.where(mask[:, ne:ne + nop],
                                        (opslice + shift) % 3, opslice)
        last = pool[:, -1]
        pool[:, -1] = np.where(mask[:, -1], 1 - last, last)
        out = []
        for row in pool:
            out.append(gt.Genotype(tuple(int(x) for x in row[:ne]),
                                   tuple(int(x) for x in row[ne:ne + nop]),
                                   int(row[-1]), num_nodes=v))
        return out


def make_strategy(name, seed, num_nodes=gt.NUM_NODES):
    if name == "random":
        return RandomStrategy(seed, num_nodes)
    if name == "rl":
        return RlStrategy(seed, num_nodes)
    if name == "mac":
        return MacStrategy(seed, num_nodes)
    raise SearchConfigError(f"unknown strategy {name!r}")


# ---------------------------------------------------------------------------
# the generic loop
# ---------------------------------------------------------------------------

@dataclass
class SearchResult:
    best_genotype: gt.Genotype | None
    best_network: nb.Network | None
    history: SearchHistory
    stop_reason: str


def run_search(strategy, objective, budget, build_cfg, train_cfg=None,
               seed=0, max_stall_proposals=50_000, replay_records=None):
    """Propose/evaluate/update until the evaluation budget is spent.

    Already-seen canonical keys cost nothing; invalid genotypes cost only
    their sentinel.  The objective's own counter is the budget authority:
    the loop never lets it advance past ``budget``.  ``replay_records``
    replays a previous run's prefix (costs taken from the records, no
    objective calls) so interrupted searches resume without re-spending.
    """
    train_cfg = train_cfg or tr.TrainConfig()
    rung_evals = train_cfg.rung_epochs * build_cfg.num_sol
    if budget < rung_evals:
        raise SearchConfigError(
            f"budget {budget} is smaller than one rung ({rung_evals} evals)")

    history = SearchHistory()
    batch = nb.InputBatch(build_cfg.num_sol, build_cfg.input_size,
                          seed=derive_seed(seed, 7))
    best_network = None
    stall = 0
    iteration = 0
    replay = list(replay_records or [])
    stop_reason = "budget"

    while history.cum_evals < budget:
        proposals = strategy.propose(history, budget)
        results = []
        for g in proposals:
            iteration += 1
            if replay:
                rec = _replay_one(replay.pop(0), g, iteration, strategy.name,
                                  history)
                results.append(rec)
                continue
            rec, net = _evaluate(g, objective, history, budget, build_cfg,
                                 train_cfg, batch, seed, iteration,
                                 strategy.name)
            results.append(rec)
            if net is not None and rec.cost <= history.best_cost:
                best_network = net
            stall = 0 if rec.evals_spent > 0 else stall + 1
            if history.cum_evals >= budget:
                break
        strategy.update(history, results)
        if stall >= max_stall_proposals:
            stop_reason = "stalled"
            break
    return SearchResult(history.best_genotype, best_network, history,
                        stop_reason)


def _evaluate(g, objective, history, budget, build_cfg, train_cfg, batch,
              seed, iteration, strategy_name):
    graph = gt.decode(g)
    key = gt.canonical_form(graph)
    report = gt.validate(graph)
    if not report.is_valid:
        rec = SearchRecord(iteration, strategy_name, g, key,
                           PENALTY_SENTINEL + report.penalty, 0, 0, np.inf)
        history.add(rec, trained=False)
        return rec, None
    if key in history.trained_costs:
        rec = SearchRecord(iteration, strategy_name, g, key,
                           history.trained_costs[key], 0, 0, np.inf)
        history.add(rec, trained=False)
        return rec, None

    remaining = budget - history.cum_evals
    cfg = tr.TrainConfig(
        max_epochs=train_cfg.max_epochs, adam=train_cfg.adam,
        psi=train_cfg.psi, rung_epochs=train_cfg.rung_epochs,
        growth=train_cfg.growth, max_budget_epochs=train_cfg.max_budget_epochs,
        fstar=train_cfg.fstar, eval_budget=remaining)
    net = nb.build(g, build_cfg)
    nb.init_weights(net, seed=derive_seed(seed, 11, iteration))
    try:
        rep = tr.budgeted_train(net, objective, batch, cfg)
    except tr.TrainAbort as abort:
        rep = abort.report
    cost = rep.f_best if np.isfinite(rep.f_best) else PENALTY_SENTINEL
    if history.first_eval_cost is None and rep.evals > 0:
        history.first_eval_cost = rep.f_first
    rec = SearchRecord(iteration, strategy_name, g, key, cost, rep.evals,
                       0, np.inf, rung_reached=_rung_of(rep.epochs_run,
                                                        train_cfg))
    history.add(rec, trained=True)
    net.meta.update({"cost": float(cost), "epochs": rep.epochs_run,
                     "stop_reason": rep.stop_reason,
                     "x_best": (None if rep.x_best is None
                                else [float(v) for v in rep.x_best])})
    return rec, net


def _rung_of(epochs, train_cfg):
    iota = train_cfg.max_budget_epochs or train_cfg.max_epochs
    caps = tr.rung_schedule(train_cfg.rung_epochs, train_cfg.growth, iota)
    for i, cap in enumerate(caps):
        if epochs <= cap:
            return i + 1
    return len(caps)


def _replay_one(record_dict, proposal, iteration, strategy_name, history):
    """Fold one logged record back into the history without evaluating."""
    text = record_dict["genotype"]
    if proposal.to_text() != text:
        raise SearchConfigError(
            f"resume mismatch at iteration {iteration}: log has {text}, "
            f"replay proposed {proposal.to_text()}")
    rec = SearchRecord(iteration, strategy_name, proposal,
                       record_dict["canonical_key"],
                       float(record_dict["cost"]),
                       int(record_dict["evals_spent"]), 0, np.inf)
    history.add(rec, trained=rec.evals_spent > 0)
    if history.first_eval_cost is None and rec.evals_spent > 0:
        history.first_eval_cost = float(record_dict.get("first_eval", rec.cost))
    return rec
