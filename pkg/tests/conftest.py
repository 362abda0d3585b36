import numpy as np
import pytest

from nasopt import genotype as gt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def chain_genotype(batch_code=1, ops=(0, 0, 0, 0, 0)):
    """The linear 7-node cell 1->2->3->4->5->6->7 used across tests."""
    pairs = gt.edge_pairs(7)
    chain = {(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7)}
    bits = tuple(1 if p in chain else 0 for p in pairs)
    return gt.Genotype(bits, tuple(ops), batch_code)


def fd_param_grads(build_loss, store, h=1e-5):
    """Finite-difference oracle over every parameter in a store."""
    from nasopt import autodiff as ad

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
