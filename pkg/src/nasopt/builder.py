"""Compile genotypes into runnable networks.

A network stacks ``m`` copies of the decoded cell, glued by 1x1
projections wherever spatial sizes disagree, and ends in a head that
flattens, maps densely to the objective dimension and squashes into the
bounds with a scaled tanh.  All shape arithmetic happens at build time;
a genotype that would shrink any map below 1x1 is rejected up front.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import genotype as gt

CHECKPOINT_SCHEMA = "nasopt-checkpoint/v1"


class BuildError(ValueError):
    """Genotype cannot be compiled under the given configuration."""


class InvalidGenotypeError(BuildError):
    """Build rejected because the validity penalty is nonzero."""

    def __init__(self, penalty):
        super().__init__(f"invalid genotype, penalty {penalty:g}")
        self.penalty = penalty


@dataclass
class BuildConfig:
    """Structural knobs of a compiled network."""

    dim: int
    lo: object = -100.0
    hi: object = 100.0
    num_cells: int = 3
    channels: int = 8
    input_size: int = 32
    num_sol: int = 500

    def __post_init__(self):
        if self.num_cells < 1 or self.channels < 1 or self.dim < 1:
            raise ValueError("num_cells, channels and dim must be >= 1")
        if self.num_sol < 1 or self.input_size < 1:
            raise ValueError("num_sol and input_size must be >= 1")
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=np.float64),
                                  (self.dim,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=np.float64),
                                  (self.dim,)).copy()
        if np.any(self.lo >= self.hi):
            raise ValueError("bounds must satisfy lo < hi elementwise")

    def to_dict(self):
        return {
            "dim": self.dim,
            "lo": list(map(float, self.lo)),
            "hi": list(map(float, self.hi)),
            "num_cells": self.num_cells,
            "channels": self.channels,
            "input_size": self.input_size,
            "num_sol": self.num_sol,
        }

    @staticmethod
    def from_dict(d):
        return BuildConfig(dim=d["dim"], lo=np.asarray(d["lo"]),
                           hi=np.asarray(d["hi"]), num_cells=d["num_cells"],
                           channels=d["channels"], input_size=d["input_size"],
                           num_sol=d["num_sol"])


class InputBatch:
    """Fixed uniform[0,1) input matrices, regenerated bit-exactly from a seed."""

    def __init__(self, num_sol, size, seed):
        self.num_sol = num_sol
        self.size = size
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.data = rng.random((num_sol, 1, size, size))
        self.data.flags.writeable = False

    def slice(self, start, stop):
        return self.data[start:stop]


def conv_param_count(n_filters, k, in_channels=1):
    """Parameter count of one conv layer: k*k*Cin weights per filter + bias."""
    return n_filters * in_channels * k * k + n_filters


@dataclass
class _NodeSpec:
    op: str                      # conv3x3 | maxpool3x3 | avgpool3x3
    preds: list                  # 1-indexed source node ids
    proj: dict = field(default_factory=dict)   # src -> (stride, target size)
    out_size: int = 0


@dataclass
class _CellSpec:
    in_size: int
    stem: bool                   # 1x1 input projection present
    nodes: dict                  # node id -> _NodeSpec (on-path intermediates)
    concat: list                 # node ids feeding the output concat
    concat_proj: dict            # src -> (stride, target size)
    out_size: int = 0


def _fit_plan(sizes, targets=None):
    """Spatial-repair plan: strided 1x1 projection + center crop per member.

    Every member larger than the smallest one is downsampled with stride
    floor(size/target) (the largest stride whose output still covers the
    target) and then center-cropped to an exact match.
    """
    target = min(sizes.values())
    plan = {}
    for src, size in sizes.items():
        if size > target:
            stride = max(1, size // target)
            plan[src] = (stride, target)
    return plan, target


class Network:
    """Executable layer program plus its parameters.

    Rebuilding from the same genotype and config, then loading the same
    parameter values, reproduces outputs bit-exactly; the forward pass is
    deterministic and records a tape for the reverse pass.
    """

    def __init__(self, genotype, cfg):
        self.genotype = genotype
        self.cfg = cfg
        self.graph = gt.decode(genotype)
        self.store = ad.ParamStore()
        self.cells = []
        self.head_dim = cfg.dim
        self.lo = cfg.lo.copy()
        self.hi = cfg.hi.copy()
        self.meta = {}
        self._compile()

    # -- construction -----------------------------------------------------

    def _compile(self):
        graph, cfg = self.graph, self.cfg
        report = gt.validate(graph)
        if not report.is_valid:
            raise InvalidGenotypeError(report.penalty)

        order = sorted(graph.on_path)
        size = cfg.input_size
        c = cfg.channels
        for ci in range(cfg.num_cells):
            spec = _CellSpec(in_size=size, stem=(ci == 0), nodes={}, concat=[],
                             concat_proj={})
            if spec.stem:
                self._add_conv(f"c{ci}_stem", 1, c, 1)
            node_size = {1: size}
            for node in order:
                preds = [p for p in graph.predecessors(node)
                         if p == 1 or p in graph.on_path]
                ns = _NodeSpec(op=graph.node_op(node), preds=preds)
                ns.proj, target = _fit_plan({p: node_size[p] for p in preds})
                for src, (stride, _) in ns.proj.items():
                    self._add_conv(f"c{ci}_n{node}_from{src}_proj", c, c, 1)
                out = target - 2                     # 3x3 window, no padding
                if out < 1:
                    raise BuildError("cell depth exceeds input size")
                if ns.op == "conv3x3":
                    self._add_conv(f"c{ci}_n{node}_conv", c, c, 3)
                ns.out_size = out
                node_size[node] = out
                spec.nodes[node] = ns
            # a valid cell always has on-path intermediates to aggregate
            spec.concat = list(order)
            spec.concat_proj, target = _fit_plan(
                {p: node_size[p] for p in order})
            for src, (stride, _) in spec.concat_proj.items():
                self._add_conv(f"c{ci}_out_from{src}_proj", c, c, 1)
            self._add_conv(f"c{ci}_out_proj", len(order) * c, c, 1)
            spec.out_size = target
            size = spec.out_size
            self.cells.append(spec)

        feat = c * size * size
        self.feature_count = feat
        self.final_size = size
        self.store.add("head_w", np.zeros((feat, cfg.dim)))
        self.store.add("head_b", np.zeros(cfg.dim))

    def _add_conv(self, prefix, cin, cout, k):
        self.store.add(f"{prefix}_w", np.zeros((cout, cin, k, k)))
        self.store.add(f"{prefix}_b", np.zeros(cout))

    # -- forward ----------------------------------------------------------

    def _conv(self, x, prefix, stride=1):
        return ad.conv2d(x, self.store.leaf(f"{prefix}_w"),
                         self.store.leaf(f"{prefix}_b"), stride=stride)

    def forward(self, x_arr):
        """Tape-recorded forward pass: [b,1,n,n] -> solutions node [b,D]."""
        x = ad.Value(np.asarray(x_arr, dtype=np.float64))
        for ci, spec in enumerate(self.cells):
            if spec.stem:
                x = self._conv(x, f"c{ci}_stem")
            outputs = {1: x}
            for node, ns in spec.nodes.items():
                terms = []
                for src in ns.preds:
                    t = outputs[src]
                    if src in ns.proj:
                        stride, target = ns.proj[src]
                        t = self._conv(t, f"c{ci}_n{node}_from{src}_proj",
                                       stride=stride)
                        t = ad.crop_center(t, target, target)
                    terms.append(t)
                acc = terms[0]
                for t in terms[1:]:
                    acc = ad.add(acc, t)
                if ns.op == "conv3x3":
                    acc = self._conv(acc, f"c{ci}_n{node}_conv")
                elif ns.op == "maxpool3x3":
                    acc = ad.pool2d(acc, "max", 3, 1)
                else:
                    acc = ad.pool2d(acc, "avg", 3, 1)
                outputs[node] = acc
            members = []
            for src in spec.concat:
                t = outputs[src]
                if src in spec.concat_proj:
                    stride, target = spec.concat_proj[src]
                    t = self._conv(t, f"c{ci}_out_from{src}_proj",
                                   stride=stride)
                    t = ad.crop_center(t, target, target)
                members.append(t)
            x = self._conv(ad.concat_channels(members), f"c{ci}_out_proj")
        flat = ad.flatten(x)
        pre = ad.dense(flat, self.store.leaf("head_w"),
                       self.store.leaf("head_b"))
        return ad.scaled_tanh(pre, self.lo, self.hi)

    def param_count(self):
        return self.store.num_params()

    def head_names(self):
        return ("head_w", "head_b")

    def body_names(self):
        return [n for n in self.store.names() if not n.startswith("head_")]


def build(genotype, cfg):
    """Compile a genotype; rejects invalid ones with their penalty."""
    return Network(genotype, cfg)


def init_weights(network, seed):
    """Glorot-uniform weights, zero biases, drawn in creation order."""
    rng = np.random.default_rng(int(seed))
    for name in network.store.names():
        arr = network.store.params[name]
        if name.endswith("_w"):
            if arr.ndim == 4:
                cout, cin, k, _ = arr.shape
                fan_in, fan_out = cin * k * k, cout * k * k
            else:
                fan_in, fan_out = arr.shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            arr[...] = rng.uniform(-a, a, size=arr.shape)
        else:
            arr[...] = 0.0
        network.store.adam_m[name][...] = 0.0
        network.store.adam_v[name][...] = 0.0
        network.store.adam_t[name] = 0
    network.meta["weight_seed"] = int(seed)
    return network


def forward_solutions(network, batch_slice):
    """Candidate solutions for a slice of the fixed input set."""
    return network.forward(batch_slice).data


def freeze_body(network):
    """Mark every non-head parameter frozen (no further Adam updates)."""
    heads = set(network.head_names())
    for name in network.store.names():
        network.store.frozen[name] = name not in heads
    return network


def replace_head(network, dim, lo, hi, seed=0):
    """Swap the dense head for a fresh one sized to a new dimension.

    Body weights and their Adam state stay bit-exact; the new head starts
    Glorot-initialized with zero bias and cleared optimizer state.
    """
    if not hasattr(network, "feature_count"):
        raise ad.GraphStateError("replace_head requires a built network")
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (dim,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (dim,)).copy()
    if np.any(lo >= hi):
        raise ValueError("bounds must satisfy lo < hi elementwise")
    feat = network.feature_count
    for name in network.head_names():
        network.store.remove(name)
    rng = np.random.default_rng(int(seed))
    a = np.sqrt(6.0 / (feat + dim))
    network.store.add("head_w", rng.uniform(-a, a, size=(feat, dim)))
    network.store.add("head_b", np.zeros(dim))
    network.head_dim = dim
    network.lo = lo
    network.hi = hi
    network.cfg.dim = dim
    network.cfg.lo = lo
    network.cfg.hi = hi
    return network


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(network, path):
    """Write the full network state as structured text (f64 round-trip)."""
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "genotype": network.genotype.to_text(),
        "build": network.cfg.to_dict(),
        "params": {
            name: {"shape": list(arr.shape),
                   "data": [float(v) for v in arr.ravel()]}
            for name, arr in network.store.params.items()
        },
        "frozen": {name: bool(v) for name, v in network.store.frozen.items()},
        "adam": {
            name: {"m": [float(v) for v in network.store.adam_m[name].ravel()],
                   "v": [float(v) for v in network.store.adam_v[name].ravel()],
                   "t": int(network.store.adam_t[name])}
            for name in network.store.names()
        },
        "meta": network.meta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Rebuild a network from a checkpoint written by :func:`save_checkpoint`."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise BuildError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise BuildError(f"unknown checkpoint schema {doc.get('schema')!r}")
    genotype = gt.Genotype.from_text(doc["genotype"])
    net = Network(genotype, BuildConfig.from_dict(doc["build"]))
    if set(doc["params"]) != set(net.store.names()):
        raise BuildError("checkpoint parameters do not match the architecture")
    for name, entry in doc["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != net.store.params[name].shape:
            raise BuildError(f"shape mismatch for {name} in checkpoint")
        net.store.params[name][...] = arr
    for name, frozen in doc["frozen"].items():
        net.store.frozen[name] = bool(frozen)
    for name, st in doc["adam"].items():
        net.store.adam_m[name][...] = np.array(st["m"]).reshape(
            net.store.params[name].shape)
        net.store.adam_v[name][...] = np.array(st["v"]).reshape(
            net.store.params[name].shape)
        net.store.adam_t[name] = int(st["t"])
    net.meta = dict(doc.get("meta", {}))
    return net
