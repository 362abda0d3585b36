"""Self-contained oracle suite behind the ``verify`` CLI command.

Each check recomputes an expected value through an independent route
(finite differences, exhaustive enumeration, a coordinate-based energy
oracle, closed-form arithmetic) and compares the production code against
it.  All randomness is fixed-seeded so a passing suite stays passing.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import autodiff as ad
from . import builder as nb
from . import genotype as gt
from . import objectives as obj
from . import surrogate as su


def _fd_param_grads(build_loss, store, h=1e-5):
    """Max relative error of stored parameter gradients vs central FD."""
    loss = build_loss()
    ad.backward(loss)
    grads = {n: (None if g is None else g.copy())
             for n, g in store.grads.items()}
    store.zero_grads()
    worst = 0.0
    for name, g in grads.items():
        if g is None:
            continue
        p = store.params[name]
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            fp = float(build_loss().data)
            p[idx] = old - h
            fm = float(build_loss().data)
            p[idx] = old
            err = abs((fp - fm) / (2 * h) - g[idx]) / max(1.0, abs(g[idx]))
            worst = max(worst, err)
    return worst


def check_shape_example():
    """5x5 input -> conv 2x2 s1 -> 4x4 -> max-pool 2x2 s1 -> 3x3 -> 9 features."""
    c1 = ad.conv_output_size(5, 2, 0, 1)
    c2 = ad.conv_output_size(c1, 2, 0, 1)
    x = ad.Value(np.arange(25, dtype=float).reshape(1, 1, 5, 5))
    h1 = ad.conv2d(x, ad.Value(np.ones((1, 1, 2, 2))), ad.Value(np.zeros(1)))
    h2 = ad.pool2d(h1, "max", 2, 1)
    feat = ad.flatten(h2)
    ok = (c1, c2) == (4, 3) and h1.shape[2:] == (4, 4) \
        and h2.shape[2:] == (3, 3) and feat.shape[1] == 9
    return ok, f"sizes {c1}->{c2}, features {feat.shape[1]}"


def check_conv_param_count():
    n = nb.conv_param_count(10, 5, in_channels=1)
    return n == 260, f"10 filters of 5x5 + biases = {n}"


def check_space_size():
    n = gt.space_size()
    return n == 2 ** 21 * 3 ** 5 * 2 == 1_019_215_872, f"{n:,}"


def check_avgpool_conv_equivalence():
    rng = np.random.default_rng(11)
    x = rng.random((2, 3, 8, 8))
    p = 2
    pooled = ad.pool2d(ad.Value(x), "avg", p, 1).data
    w = np.zeros((3, 3, p, p))
    for c in range(3):
        w[c, c] = 1.0 / (p * p)
    conved = ad.conv2d(ad.Value(x), ad.Value(w), ad.Value(np.zeros(3))).data
    diff = float(np.abs(pooled - conved).max())
    return diff < 1e-12, f"max elementwise diff {diff:.2e}"


def check_layer_gradients():
    rng = np.random.default_rng(5)
    store = ad.ParamStore()
    store.add("cw", rng.normal(size=(3, 2, 3, 3)) * 0.5)
    store.add("cb", rng.normal(size=3) * 0.5)
    store.add("pw", rng.normal(size=(3, 3, 1, 1)) * 0.5)
    store.add("pb", rng.normal(size=3) * 0.5)
    store.add("dw", rng.normal(size=(24, 4)) * 0.5)
    store.add("db", rng.normal(size=4) * 0.5)
    x1 = rng.normal(size=(2, 2, 8, 8))
    x2 = rng.normal(size=(2, 2, 8, 8))

    def loss():
        a = ad.conv2d(ad.Value(x1), store.leaf("cw"), store.leaf("cb"))
        b = ad.conv2d(ad.Value(x2), store.leaf("cw"), store.leaf("cb"))
        s = ad.add(a, b)
        s = ad.conv2d(s, store.leaf("pw"), store.leaf("pb"), stride=2)
        m = ad.pool2d(s, "max", 2, 1)
        v = ad.pool2d(s, "avg", 2, 1)
        cat = ad.concat_channels([m, v])
        cat = ad.crop_center(cat, 2, 2)
        d = ad.dense(ad.flatten(cat), store.leaf("dw"), store.leaf("db"))
        return ad.tensor_mean(ad.scaled_tanh(d, -3.0, 7.0))

    err = _fd_param_grads(loss, store)
    return err < 1e-4, f"max rel err {err:.2e}"


def check_objective_gradients():
    rng = np.random.default_rng(17)
    worst = {}
    for fam in sorted(obj.FAMILY_NAMES):
        inst = obj.make_benchmark(fam, 6, seed=3)
        errs = []
        for _ in range(5):
            x = rng.uniform(-90, 90, size=6)
            errs.append(obj.finite_diff_oracle(inst, x))
        worst[fam] = max(errs)
    bad = {k: v for k, v in worst.items() if v >= 1e-5}
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    return not bad, detail


def reference_protein_energy(sequence, angles_deg):
    """Independent oracle: positions via explicit 2x2 rotation matrices."""
    zeta = [1.0 if ch == "A" else -1.0 for ch in sequence]
    length = len(sequence)
    pos = [np.array([0.0, 0.0]), np.array([1.0, 0.0])]
    direction = np.array([1.0, 0.0])
    for theta in np.radians(np.asarray(angles_deg, dtype=np.float64)):
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        direction = rot @ direction
        pos.append(pos[-1] + direction)
    energy = sum((1.0 - np.cos(t)) / 4.0
                 for t in np.radians(np.asarray(angles_deg, dtype=np.float64)))
    for i in range(length):
        for j in range(i + 2, length):
            r = float(np.linalg.norm(pos[j] - pos[i]))
            c = (1.0 + zeta[i] + zeta[j] + 5.0 * zeta[i] * zeta[j]) / 8.0
            energy += r ** -12 - c * r ** -6
    return float(energy)


def check_protein_energy():
    exact = obj.protein_energy(obj.ProteinModel("AAA"), np.zeros(1))
    if exact != 2.0 ** -12 - 2.0 ** -6:
        return False, f"AAA straight-chain energy {exact!r}"
    rng = np.random.default_rng(23)
    table = obj.protein_table()
    worst = 0.0
    for pdb in ("1BXP", "2ZNF"):
        model = obj.ProteinModel(table[pdb], pdb_id=pdb)
        for _ in range(5):
            angles = rng.uniform(-179.0, 179.0, size=model.dim)
            got = obj.protein_energy(model, angles)
            want = reference_protein_energy(model.sequence, angles)
            worst = max(worst, abs(got - want) / max(1.0, abs(want)))
    return worst < 1e-10, f"max rel diff vs oracle {worst:.2e}"


def sample_clear_conformation(model, rng, min_dist=0.8, spread=90.0):
    """Random angles rejected until no nonbonded pair comes too close.

    Near-contact conformations make the r^-12 term so stiff that central
    differences themselves lose accuracy; the gradient contract excludes
    overlaps anyway.
    """
    iu, ju = np.triu_indices(model.length, k=2)
    while True:
        angles = rng.uniform(-spread, spread, model.dim)
        pos = obj.protein_positions(angles, model.length)
        d = np.sqrt(((pos[ju] - pos[iu]) ** 2).sum(axis=1))
        if d.min() >= min_dist:
            return angles


def check_protein_gradient():
    rng = np.random.default_rng(29)
    table = obj.protein_table()
    model = obj.ProteinModel(table["2ZNF"], "2ZNF")
    inst = obj.ProteinObjective(model)
    worst = max(
        obj.finite_diff_oracle(inst, sample_clear_conformation(model, rng))
        for _ in range(5))
    return worst < 1e-5, f"max rel err {worst:.2e}"


def check_penalty():
    cfg = gt.PenaltyConfig(eta1=3.0, eta2=7.0)
    pairs = gt.edge_pairs(7)
    ten = tuple(1 if i < 10 else 0 for i in range(len(pairs)))
    r1 = gt.validate(gt.decode(gt.Genotype(ten, (0,) * 5, 0)), cfg)
    zero = gt.Genotype((0,) * 21, (0,) * 5, 0)
    r2 = gt.validate(gt.decode(zero), cfg)
    chain = {(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7)}
    full = gt.Genotype(tuple(1 if p in chain else 0 for p in pairs),
                       (0,) * 5, 0)
    r3 = gt.validate(gt.decode(full), cfg)
    ok = (r1.penalty == 1 * 3.0 and r2.penalty == 6 * 7.0
          and r3.penalty == 0.0)
    return ok, f"theta=10: {r1.penalty}, edgeless: {r2.penalty}, path: {r3.penalty}"


def permutation_orbit_key(graph):
    """Oracle canonical key via adjacency-matrix relabeling (numpy route)."""
    v = graph.num_nodes
    adj = graph.adjacency
    best = None
    for perm in itertools.permutations(range(1, v - 1)):
        order = np.array([0, *perm, v - 1])
        sub = adj[np.ix_(order, order)]
        ops = tuple(graph.op_codes[i - 1] for i in perm)
        key = (sub.tobytes(), ops)
        if best is None or key < best:
            best = key
    return best


def check_isomorphism_counts():
    keys_prod = set()
    keys_oracle = set()
    count = 0
    for g in gt.enumerate_reduced(4):
        graph = gt.decode(g)
        keys_prod.add(gt.canonical_form(graph))
        keys_oracle.add(permutation_orbit_key(graph))
        count += 1
    ok = count == 576 and len(keys_prod) == len(keys_oracle)
    return ok, (f"{count} genotypes, {len(keys_prod)} canonical keys, "
                f"{len(keys_oracle)} oracle classes")


def check_rbf():
    rng = np.random.default_rng(31)
    xs = rng.random((25, 3))
    ys = rng.normal(size=25)
    model = su.fit_surrogate(xs, ys)
    resid = float(np.abs(model.predict(xs) - ys).max())
    # cubic RBF + linear tail reproduces 1-D cubics away from the data
    # the natural-spline boundary effect decays geometrically, so the
    # reproduction is checked away from the ends of the data window
    xs1 = np.linspace(0.0, 2.0, 40)[:, None]
    poly = lambda t: 2.0 * t ** 3 - t ** 2 + 0.5 * t - 3.0  # noqa: E731
    m1 = su.fit_surrogate(xs1, poly(xs1[:, 0]))
    held = np.linspace(0.8, 1.2, 21)[:, None]
    err = float(np.abs(m1.predict(held) - poly(held[:, 0])).max())
    ok = resid < 1e-8 and err < 1e-6
    return ok, f"interp resid {resid:.1e}, cubic recovery {err:.1e}"


def check_adam():
    store = ad.ParamStore()
    store.add("p", np.full(3, 2.5))
    before = store.params["p"].copy()
    store.grads["p"] = np.zeros(3)
    ad.adam_step(store, ad.AdamConfig())
    ok = np.array_equal(store.params["p"], before) and store.adam_t["p"] == 1
    # two steps of constant gradient match the hand-unrolled recurrence
    s2 = ad.ParamStore()
    s2.add("q", np.zeros(1))
    cfg = ad.AdamConfig(lr=0.1)
    g = 0.7
    w = 0.0
    m = v = 0.0
    for t in (1, 2):
        s2.grads["q"] = np.full(1, g)
        ad.adam_step(s2, cfg)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        w -= cfg.lr * (m / (1 - cfg.beta1 ** t)) / (
            np.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.eps)
    ok2 = abs(float(s2.params["q"][0]) - w) < 1e-15
    return ok and ok2, f"fixed point {ok}, 2-step recurrence {ok2}"


def check_genotype_roundtrip():
    rng = np.random.default_rng(37)
    for _ in range(200):
        g = gt.sample_uniform(rng)
        if gt.Genotype.from_text(g.to_text()) != g:
            return False, f"text roundtrip failed for {g.to_text()}"
        if gt.encode(gt.decode(g), g.batch_code) != g:
            return False, f"decode/encode roundtrip failed for {g.to_text()}"
    return True, "200 random genotypes round-trip"


ALL_CHECKS = [
    ("shape-worked-example", check_shape_example),
    ("conv-parameter-count", check_conv_param_count),
    ("search-space-size", check_space_size),
    ("avgpool-conv-equivalence", check_avgpool_conv_equivalence),
    ("layer-gradients-vs-fd", check_layer_gradients),
    ("objective-gradients-vs-fd", check_objective_gradients),
    ("protein-energy-oracle", check_protein_energy),
    ("protein-gradient-vs-fd", check_protein_gradient),
    ("validity-penalty", check_penalty),
    ("isomorphism-reduced-space", check_isomorphism_counts),
    ("rbf-interpolation", check_rbf),
    ("adam-recurrence", check_adam),
    ("genotype-roundtrip", check_genotype_roundtrip),
]


def run_all(report=print):
    """Run every check; returns True when all pass."""
    all_ok = True
    for name, fn in ALL_CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:                      # noqa: BLE001
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        report(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
