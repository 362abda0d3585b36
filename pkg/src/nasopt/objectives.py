"""Differentiable objectives: benchmark families and the AB planar protein.

Every objective exposes value, analytic gradient and a thread-safe
evaluation counter (the unit of all budget accounting).  Benchmark
instances compose a family base formula with a seeded shift and a seeded
orthogonal rotation; the official competition data files are not used,
so absolute literature values are not comparable.
"""

from __future__ import annotations

import math
import threading
from importlib import resources

import numpy as np


class ObjectiveError(ValueError):
    """Unknown family, bad instance spec or out-of-domain input."""


class Objective:
    """Black-box function f: R^D -> R with bounds and analytic gradient.

    Subclasses implement ``_value_batch`` and ``_gradient_batch``; the
    public wrappers handle counting.  Gradient calls are never charged to
    the evaluation counter.
    """

    def __init__(self, obj_id, dim, lo, hi):
        self.id = obj_id
        self.dim = int(dim)
        self.lo = np.full(dim, lo, dtype=np.float64) if np.isscalar(lo) else np.asarray(lo, dtype=np.float64)
        self.hi = np.full(dim, hi, dtype=np.float64) if np.isscalar(hi) else np.asarray(hi, dtype=np.float64)
        self.optimum = None          # known minimizer, when there is one
        self._evals = 0
        self._lock = threading.Lock()

    @property
    def evals(self):
        return self._evals

    def _count(self, n):
        with self._lock:
            self._evals += n

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._count(1)
        return float(self._value_batch(x[None, :])[0])

    def value_batch(self, xs):
        xs = np.asarray(xs, dtype=np.float64)
        self._count(xs.shape[0])
        return self._value_batch(xs)

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self._gradient_batch(x[None, :])[0]

    def gradient_batch(self, xs):
        return self._gradient_batch(np.asarray(xs, dtype=np.float64))

    def _value_batch(self, xs):
        raise NotImplementedError

    def _gradient_batch(self, xs):
        raise NotImplementedError


def finite_diff_oracle(objective, x, h=1e-5):
    """Max relative error of the analytic gradient vs central differences.

    error_i = |(f(x+h e_i) - f(x-h e_i)) / 2h - g_i| / max(1, |g_i|);
    evaluations run through the uncounted path so oracles do not disturb
    budget accounting.
    """
    x = np.asarray(x, dtype=np.float64)
    g = objective.gradient(x)
    worst = 0.0
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        fp = float(objective._value_batch((x + step)[None, :])[0])
        fm = float(objective._value_batch((x - step)[None, :])[0])
        fd = (fp - fm) / (2.0 * h)
        err = abs(fd - g[i]) / max(1.0, abs(g[i]))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# benchmark families
# ---------------------------------------------------------------------------

# value of w*sin(sqrt(w)) at the standard Schwefel minimizer; using the
# computed product keeps f(optimum) exactly zero at f64
_SCHWEFEL_X = 420.9687462275036
_SCHWEFEL_F = _SCHWEFEL_X * math.sin(math.sqrt(_SCHWEFEL_X))


def _bent_cigar(z):
    return z[:, 0] ** 2 + 1e6 * np.sum(z[:, 1:] ** 2, axis=1)


def _bent_cigar_grad(z):
    g = 2e6 * z
    g[:, 0] = 2.0 * z[:, 0]
    return g


def _zakharov(z):
    i = np.arange(1, z.shape[1] + 1)
    s = np.sum(0.5 * i * z, axis=1)
    return np.sum(z ** 2, axis=1) + s ** 2 + s ** 4


def _zakharov_grad(z):
    i = np.arange(1, z.shape[1] + 1)
    s = np.sum(0.5 * i * z, axis=1)
    return 2.0 * z + ((2.0 * s + 4.0 * s ** 3)[:, None]) * (0.5 * i)


def _rosenbrock(w):
    return np.sum(100.0 * (w[:, :-1] ** 2 - w[:, 1:]) ** 2
                  + (w[:, :-1] - 1.0) ** 2, axis=1)


def _rosenbrock_grad(w):
    g = np.zeros_like(w)
    d = w[:, :-1] ** 2 - w[:, 1:]
    g[:, :-1] += 400.0 * w[:, :-1] * d + 2.0 * (w[:, :-1] - 1.0)
    g[:, 1:] += -200.0 * d
    return g


def _rastrigin(w):
    return np.sum(w ** 2 - 10.0 * np.cos(2.0 * np.pi * w) + 10.0, axis=1)


def _rastrigin_grad(w):
    return 2.0 * w + 20.0 * np.pi * np.sin(2.0 * np.pi * w)


def _schaffer_pair(u, v):
    s = u ** 2 + v ** 2
    r = np.sqrt(s)
    return 0.5 + (np.sin(r) ** 2 - 0.5) / (1.0 + 0.001 * s) ** 2


def _schaffer_pair_dds(u, v):
    # derivative w.r.t. s = u^2 + v^2; sin(2r)/(2r) stays finite at 0
    s = u ** 2 + v ** 2
    r = np.sqrt(s)
    q = 1.0 + 0.001 * s
    sinc2r = np.sinc(2.0 * r / np.pi)
    return sinc2r / q ** 2 - 0.002 * (np.sin(r) ** 2 - 0.5) / q ** 3


def _schaffer(w):
    wn = np.roll(w, -1, axis=1)
    return np.sum(_schaffer_pair(w, wn), axis=1)


def _schaffer_grad(w):
    wn = np.roll(w, -1, axis=1)
    dds = _schaffer_pair_dds(w, wn)
    g = dds * 2.0 * w                       # each pair (w_i, w_{i+1}) via u
    g += np.roll(dds * 2.0 * wn, 1, axis=1)  # and via v of the previous pair
    return g


def _lunacek_consts(dim):
    d = 1.0
    s = 1.0 - 1.0 / (2.0 * math.sqrt(dim + 20.0) - 8.2)
    mu0 = 2.5
    mu1 = -math.sqrt((mu0 ** 2 - d) / s)
    return d, s, mu0, mu1


def _lunacek(w):
    dim = w.shape[1]
    d, s, mu0, mu1 = _lunacek_consts(dim)
    t1 = np.sum((w - mu0) ** 2, axis=1)
    t2 = d * dim + s * np.sum((w - mu1) ** 2, axis=1)
    return np.minimum(t1, t2) + 10.0 * (dim - np.sum(np.cos(2.0 * np.pi * (w - mu0)), axis=1))


def _lunacek_grad(w):
    dim = w.shape[1]
    d, s, mu0, mu1 = _lunacek_consts(dim)
    t1 = np.sum((w - mu0) ** 2, axis=1)
    t2 = d * dim + s * np.sum((w - mu1) ** 2, axis=1)
    first = (t1 <= t2)[:, None]
    g = np.where(first, 2.0 * (w - mu0), 2.0 * s * (w - mu1))
    return g + 20.0 * np.pi * np.sin(2.0 * np.pi * (w - mu0))


def _noncont_round(w):
    return np.where(np.abs(w) <= 0.5, w, np.round(2.0 * w) / 2.0)


def _noncont_rastrigin(w):
    return _rastrigin(_noncont_round(w))


def _noncont_rastrigin_grad(w):
    y = _noncont_round(w)
    # the snapped region is piecewise constant: zero gradient there
    return np.where(np.abs(w) <= 0.5, _rastrigin_grad(y), 0.0)


def _levy(w):
    u = 1.0 + w / 4.0
    head = np.sin(np.pi * u[:, 0]) ** 2
    mid = np.sum((u[:, :-1] - 1.0) ** 2
                 * (1.0 + 10.0 * np.sin(np.pi * u[:, :-1] + 1.0) ** 2), axis=1)
    tail = (u[:, -1] - 1.0) ** 2 * (1.0 + np.sin(2.0 * np.pi * u[:, -1]) ** 2)
    return head + mid + tail


def _levy_grad(w):
    u = 1.0 + w / 4.0
    g = np.zeros_like(u)
    g[:, 0] += np.pi * np.sin(2.0 * np.pi * u[:, 0])
    sm = np.sin(np.pi * u[:, :-1] + 1.0)
    g[:, :-1] += (2.0 * (u[:, :-1] - 1.0) * (1.0 + 10.0 * sm ** 2)
                  + (u[:, :-1] - 1.0) ** 2 * 10.0 * np.pi
                  * np.sin(2.0 * (np.pi * u[:, :-1] + 1.0)))
    g[:, -1] += (2.0 * (u[:, -1] - 1.0) * (1.0 + np.sin(2.0 * np.pi * u[:, -1]) ** 2)
                 + (u[:, -1] - 1.0) ** 2 * 2.0 * np.pi * np.sin(4.0 * np.pi * u[:, -1]))
    return g / 4.0


def _schwefel(w):
    u = w + _SCHWEFEL_X
    return np.sum(_SCHWEFEL_F - u * np.sin(np.sqrt(np.abs(u))), axis=1)


def _schwefel_grad(w):
    u = w + _SCHWEFEL_X
    r = np.sqrt(np.abs(u))
    return -(np.sin(r) + 0.5 * r * np.cos(r))


# family id -> (base value on scaled z, base gradient on scaled z, input scale)
_FAMILIES = {
    "F1": (_bent_cigar, _bent_cigar_grad, 1.0),
    "F3": (_zakharov, _zakharov_grad, 1.0),
    "F4": (lambda w: _rosenbrock(w + 1.0),
           lambda w: _rosenbrock_grad(w + 1.0), 2.048 / 100.0),
    "F5": (_rastrigin, _rastrigin_grad, 1.0),
    "F6": (_schaffer, _schaffer_grad, 0.5 / 100.0),
    "F7": (lambda w: _lunacek(w + 2.5),
           lambda w: _lunacek_grad(w + 2.5), 10.0 / 100.0),
    "F8": (_noncont_rastrigin, _noncont_rastrigin_grad, 1.0),
    "F9": (_levy, _levy_grad, 5.12 / 100.0),
    "F10": (_schwefel, _schwefel_grad, 1000.0 / 100.0),
}

FAMILY_NAMES = {
    "F1": "bent-cigar", "F3": "zakharov", "F4": "rosenbrock",
    "F5": "rastrigin", "F6": "expanded-schaffer", "F7": "lunacek-bi-rastrigin",
    "F8": "noncontinuous-rastrigin", "F9": "levy", "F10": "schwefel",
}


def rotation_matrix(dim, rng):
    """Seeded orthogonal matrix via QR of a Gaussian draw, sign-fixed."""
    a = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


class BenchmarkInstance(Objective):
    """Shifted, rotated instance of one benchmark family.

    f(x) = base(scale * R (x - o)) with the family's conventional input
    scale folded in; the gradient follows by the chain rule through R.
    """

    def __init__(self, family, dim, seed):
        if family not in _FAMILIES:
            raise ObjectiveError(f"unknown benchmark family {family!r}")
        if dim < 2:
            raise ObjectiveError("benchmark dimension must be >= 2")
        super().__init__(f"{family}:{dim}:{seed}", dim, -100.0, 100.0)
        self.family = family
        self.seed = int(seed)
        rng = np.random.default_rng([int(seed), dim, _FAMILY_SEED_TAG[family]])
        self.shift = rng.uniform(-80.0, 80.0, size=dim)
        self.rotation = rotation_matrix(dim, rng)
        self.optimum = self.shift.copy()
        self._base, self._base_grad, self._scale = _FAMILIES[family]

    def _value_batch(self, xs):
        z = (xs - self.shift) @ self.rotation.T * self._scale
        return self._base(z)

    def _gradient_batch(self, xs):
        z = (xs - self.shift) @ self.rotation.T * self._scale
        return self._scale * (self._base_grad(z) @ self.rotation)


# distinct per-family stream tags so instances of different families with
# the same (seed, dim) do not share shifts
_FAMILY_SEED_TAG = {name: i for i, name in enumerate(sorted(_FAMILIES))}


class SphereObjective(Objective):
    """Plain sum of squares; a smoke-test objective, not a literature one."""

    def __init__(self, dim, seed=0):
        super().__init__(f"sphere:{dim}:{seed}", dim, -100.0, 100.0)
        self.optimum = np.zeros(dim)

    def _value_batch(self, xs):
        return np.sum(xs ** 2, axis=1)

    def _gradient_batch(self, xs):
        return 2.0 * xs


class ShiftedQuadratic(Objective):
    """Seeded shifted quadratic; the smooth family used in transfer checks."""

    def __init__(self, dim, seed):
        super().__init__(f"quad:{dim}:{seed}", dim, -100.0, 100.0)
        rng = np.random.default_rng([int(seed), dim, 991])
        self.shift = rng.uniform(-80.0, 80.0, size=dim)
        self.optimum = self.shift.copy()

    def _value_batch(self, xs):
        return np.sum((xs - self.shift) ** 2, axis=1)

    def _gradient_batch(self, xs):
        return 2.0 * (xs - self.shift)


def make_benchmark(family, dim, seed):
    """Objective factory for ids like F5, plus the sphere/quad extras."""
    if family in _FAMILIES:
        return BenchmarkInstance(family, dim, seed)
    if family == "sphere":
        return SphereObjective(dim, seed)
    if family == "quad":
        return ShiftedQuadratic(dim, seed)
    raise ObjectiveError(f"unknown objective family {family!r}")


def parse_objective(spec):
    """Instance from a ``<family>:<D>:<seed>`` or ``<PDB-ID>`` string."""
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ObjectiveError(f"bad objective spec {spec!r}; want family:D:seed")
        family, d, seed = parts
        try:
            return make_benchmark(family, int(d), int(seed))
        except ValueError as exc:
            raise ObjectiveError(f"non-integer field in {spec!r}") from exc
    seqs = protein_table()
    if spec in seqs:
        return ProteinObjective(ProteinModel(seqs[spec], pdb_id=spec))
    raise ObjectiveError(f"unknown objective {spec!r}")


# ---------------------------------------------------------------------------
# AB off-lattice protein model (planar, unit bonds)
# ---------------------------------------------------------------------------

_OVERLAP_EPS = 1e-12


def protein_table():
    """PDB-id -> AB sequence, read from the shipped instance file."""
    text = resources.files("nasopt.data").joinpath("proteins.txt").read_text()
    table = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        pdb_id, seq = line.split()
        table[pdb_id] = seq
    return table


class ProteinModel:
    """AB sequence with species values and pair coefficients.

    Species A carries zeta=+1 and B zeta=-1; the Stillinger pair
    coefficient C = (1 + zi + zj + 5 zi zj) / 8 gives AA=1, BB=1/2,
    AB=-1/2.  Angles are degrees in (-180, 180]; D = L - 2.
    """

    def __init__(self, sequence, pdb_id=""):
        sequence = sequence.strip().upper()
        if len(sequence) < 3 or set(sequence) - {"A", "B"}:
            raise ObjectiveError(f"bad AB sequence {sequence!r}")
        self.sequence = sequence
        self.pdb_id = pdb_id
        self.length = len(sequence)
        self.dim = self.length - 2
        zeta = np.where(np.frombuffer(sequence.encode(), dtype=np.uint8)
                        == ord("A"), 1.0, -1.0)
        self.zeta = zeta
        self.pair_coeff = (1.0 + zeta[:, None] + zeta[None, :]
                           + 5.0 * zeta[:, None] * zeta[None, :]) / 8.0


def protein_positions(angles_deg, length):
    """Planar chain coordinates from bond angles in degrees.

    p1 = (0,0), p2 = (1,0); each bond angle turns the running heading.
    """
    angles_deg = np.asarray(angles_deg, dtype=np.float64)
    if angles_deg.shape != (length - 2,):
        raise ObjectiveError(
            f"need {length - 2} angles for a chain of {length}, got {angles_deg.shape}")
    if np.any(angles_deg <= -180.0) or np.any(angles_deg > 180.0):
        raise ObjectiveError("bond angles must lie in (-180, 180] degrees")
    heading = np.concatenate([[0.0], np.cumsum(np.radians(angles_deg))])
    steps = np.stack([np.cos(heading), np.sin(heading)], axis=1)
    pos = np.zeros((length, 2))
    pos[1:] = np.cumsum(steps, axis=0)
    return pos


def protein_energy(model, angles_deg, positions=None):
    """Bending plus Lennard-Jones-style pair energy of a conformation.

    Returns +inf when two nonbonded monomers (j >= i+2) coincide; the
    gradient is unavailable at such points.
    """
    if positions is None:
        positions = protein_positions(angles_deg, model.length)
    theta = np.radians(np.asarray(angles_deg, dtype=np.float64))
    bending = float(np.sum((1.0 - np.cos(theta)) / 4.0))

    diff = positions[None, :, :] - positions[:, None, :]
    r = np.sqrt(np.sum(diff * diff, axis=2))
    iu, ju = np.triu_indices(model.length, k=2)
    rp = r[iu, ju]
    if np.any(rp < _OVERLAP_EPS):
        return math.inf
    c = model.pair_coeff[iu, ju]
    inv6 = rp ** -6
    pair = float(np.sum(inv6 * inv6 - c * inv6))
    return bending + pair


def protein_gradient(model, angles_deg):
    """Exact partials of the energy w.r.t. the bond angles (degrees).

    Reverse accumulation: pair forces on positions, then each angle
    collects the torque of everything downstream of its joint.
    """
    angles_deg = np.asarray(angles_deg, dtype=np.float64)
    pos = protein_positions(angles_deg, model.length)
    theta = np.radians(angles_deg)
    length = model.length

    diff = pos[None, :, :] - pos[:, None, :]        # diff[i,j] = p_j - p_i
    r = np.sqrt(np.sum(diff * diff, axis=2))
    iu, ju = np.triu_indices(length, k=2)
    rp = r[iu, ju]
    if np.any(rp < _OVERLAP_EPS):
        raise NumericOverlapError("coincident monomers; gradient unavailable")

    # dE/dr for each nonbonded pair, scattered to position forces
    c = model.pair_coeff[iu, ju]
    dedr = -12.0 * rp ** -13 + 6.0 * c * rp ** -7
    unit = diff[iu, ju] / rp[:, None]
    forces = np.zeros((length, 2))
    np.add.at(forces, ju, dedr[:, None] * unit)
    np.add.at(forces, iu, -dedr[:, None] * unit)

    # rotate positions by +90 degrees: R90 (x, y) = (-y, x)
    rot = np.stack([-pos[:, 1], pos[:, 0]], axis=1)
    gr = np.sum(forces * rot, axis=1)              # G_m . R90 p_m
    suffix_gr = np.cumsum(gr[::-1])[::-1]          # sums over m >= k
    suffix_f = np.cumsum(forces[::-1], axis=0)[::-1]

    grad = np.empty(model.dim)
    for k in range(2, length):                     # angle theta_k, 1-indexed
        g = suffix_gr[k] - (suffix_f[k, 0] * -pos[k - 1, 1]
                            + suffix_f[k, 1] * pos[k - 1, 0])
        grad[k - 2] = g
    grad += np.sin(theta) / 4.0
    return grad * (np.pi / 180.0)


class NumericOverlapError(ArithmeticError):
    """Raised when the protein gradient is requested at an overlap point."""


class ProteinObjective(Objective):
    """Objective wrapper over a protein model; variables in degrees."""

    def __init__(self, model):
        super().__init__(model.pdb_id or model.sequence, model.dim,
                         -180.0, 180.0)
        self.model = model

    def _value_batch(self, xs):
        return np.array([protein_energy(self.model, row) for row in xs])

    def _gradient_batch(self, xs):
        return np.stack([protein_gradient(self.model, row) for row in xs])
