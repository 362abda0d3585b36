"""Recurrent controller that emits genotypes token by token.

A two-layer tanh RNN (35 hidden units per layer) reads the previously
sampled token and produces logits through one output head per gene
segment (edge / operation / batch-size alphabets).  Zero-initialized
heads make the initial policy exactly uniform.  Updates follow the
score-function estimator: the log-likelihood of each sampled sequence is
scaled by its baseline-subtracted reward and pushed through truncated-
free BPTT, then applied with Adam plus L2 weight decay.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import genotype as gt

HIDDEN = 35
BASELINE_DECAY = 0.95
REWARD_CLIP = 12.0


def reward_from_cost(cost):
    """Log-compressed reward: costs span many orders of magnitude."""
    r = -np.log10(max(float(cost), 1e-12))
    return float(np.clip(r, -REWARD_CLIP, REWARD_CLIP))


def genotype_segments(num_nodes=gt.NUM_NODES):
    """(count, alphabet size) runs of the gene string."""
    v = num_nodes
    return [(v * (v - 1) // 2, 2), (v - 2, 3), (1, 2)]


class RnnController:
    """Policy over token sequences with per-segment softmax heads."""

    def __init__(self, segments, seed=0, hidden=HIDDEN,
                 lr=0.1, beta1=0.9, weight_decay=1e-4):
        self.segments = list(segments)
        self.alphabets = []
        for count, k in self.segments:
            self.alphabets.extend([k] * count)
        self.seq_len = len(self.alphabets)
        self.hidden = hidden
        self.weight_decay = weight_decay
        self.adam = ad.AdamConfig(lr=lr, beta1=beta1)
        self.baseline = None
        self.last_logps = None

        # inputs are one-hot over {start, 0, 1, 2}
        self.in_dim = 4
        rng = np.random.default_rng(int(seed))
        store = ad.ParamStore()

        def glorot(shape):
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-a, a, size=shape)

        store.add("wx1", glorot((hidden, self.in_dim)))
        store.add("wh1", glorot((hidden, hidden)))
        store.add("b1", np.zeros(hidden))
        store.add("w12", glorot((hidden, hidden)))
        store.add("wh2", glorot((hidden, hidden)))
        store.add("b2", np.zeros(hidden))
        for si, (_, k) in enumerate(self.segments):
            store.add(f"head{si}_w", np.zeros((k, hidden)))
            store.add(f"head{si}_b", np.zeros(k))
        self.store = store
        self._head_of_pos = []
        for si, (count, _) in enumerate(self.segments):
            self._head_of_pos.extend([si] * count)

    # -- forward -----------------------------------------------------------

    def _step(self, token_in, h1, h2):
        p = self.store.params
        x = np.zeros(self.in_dim)
        x[token_in + 1] = 1.0                    # -1 encodes the start token
        z1 = p["wx1"] @ x + p["wh1"] @ h1 + p["b1"]
        n1 = np.tanh(z1)
        z2 = p["w12"] @ n1 + p["wh2"] @ h2 + p["b2"]
        n2 = np.tanh(z2)
        return x, n1, n2

    def _probs(self, pos, h2):
        p = self.store.params
        si = self._head_of_pos[pos]
        logits = p[f"head{si}_w"] @ h2 + p[f"head{si}_b"]
        e = np.exp(logits - logits.max())
        return e / e.sum()

    def sample(self, rng, greedy=False, forced=None):
        """Draw one token sequence; returns (tokens, per-token log-probs).

        ``forced`` replays a given sequence (used to rebuild caches at
        update time); ``greedy`` takes the argmax everywhere.
        """
        h1 = np.zeros(self.hidden)
        h2 = np.zeros(self.hidden)
        prev = -1
        tokens = []
        logps = []
        for pos in range(self.seq_len):
            _, h1, h2 = self._step(prev, h1, h2)
            probs = self._probs(pos, h2)
            if forced is not None:
                a = int(forced[pos])
            elif greedy:
                a = int(np.argmax(probs))
            else:
                a = int(rng.choice(len(probs), p=probs))
            tokens.append(a)
            logps.append(float(np.log(probs[a])))
            prev = a
        self.last_logps = list(logps)
        return tokens, logps

    def sample_genotype(self, rng, num_nodes=gt.NUM_NODES, greedy=False):
        tokens, logps = self.sample(rng, greedy=greedy)
        return self.tokens_to_genotype(tokens, num_nodes), logps

    def tokens_to_genotype(self, tokens, num_nodes=gt.NUM_NODES):
        ne = num_nodes * (num_nodes - 1) // 2
        nop = num_nodes - 2
        return gt.Genotype(tuple(tokens[:ne]), tuple(tokens[ne:ne + nop]),
                           tokens[ne + nop], num_nodes=num_nodes)

    def sequence_logprob(self, tokens):
        """Log-probability of a whole sequence under the current policy."""
        _, logps = self.sample(rng=None, forced=tokens)
        return float(sum(logps))

    # -- policy gradient ----------------------------------------------------

    def update(self, episodes):
        """One REINFORCE/Adam step from [(tokens, reward), ...].

        Rewards are centered by an EMA baseline; non-finite rewards are
        dropped with a warning count returned to the caller.
        """
        clean = [(t, r) for t, r in episodes if np.isfinite(r)]
        skipped = len(episodes) - len(clean)
        if not clean:
            return skipped
        rewards = np.array([r for _, r in clean])
        if self.baseline is None:
            self.baseline = float(rewards.mean())
        advantages = rewards - self.baseline
        self.baseline = (BASELINE_DECAY * self.baseline
                         + (1.0 - BASELINE_DECAY) * float(rewards.mean()))

        m = len(clean)
        p = self.store.params
        grads = {name: np.zeros_like(arr) for name, arr in p.items()}
        for (tokens, _), adv in zip(clean, advantages):
            self._accumulate_episode(tokens, adv / m, grads)

        for name, g in grads.items():
            g += self.weight_decay * p[name]
            self.store.grads[name] = g
        ad.adam_step(self.store, self.adam)
        return skipped

    def _accumulate_episode(self, tokens, coeff, grads):
        """Backprop -coeff * log P(tokens) through the unrolled network."""
        p = self.store.params
        h1 = np.zeros(self.hidden)
        h2 = np.zeros(self.hidden)
        prev = -1
        cache = []
        for pos in range(self.seq_len):
            x, n1, n2 = self._step(prev, h1, h2)
            probs = self._probs(pos, n2)
            cache.append((x, h1, h2, n1, n2, probs))
            h1, h2 = n1, n2
            prev = tokens[pos]

        dh1 = np.zeros(self.hidden)
        dh2 = np.zeros(self.hidden)
        for pos in range(self.seq_len - 1, -1, -1):
            x, h1_prev, h2_prev, n1, n2, probs = cache[pos]
            si = self._head_of_pos[pos]
            dlogits = coeff * probs          # d(-coeff*logP)/dlogits
            dlogits[tokens[pos]] -= coeff
            grads[f"head{si}_w"] += np.outer(dlogits, n2)
            grads[f"head{si}_b"] += dlogits
            dn2 = p[f"head{si}_w"].T @ dlogits + dh2
            dz2 = dn2 * (1.0 - n2 * n2)
            grads["w12"] += np.outer(dz2, n1)
            grads["wh2"] += np.outer(dz2, h2_prev)
            grads["b2"] += dz2
            dn1 = p["w12"].T @ dz2 + dh1
            dz1 = dn1 * (1.0 - n1 * n1)
            grads["wx1"] += np.outer(dz1, x)
            grads["wh1"] += np.outer(dz1, h1_prev)
            grads["b1"] += dz1
            dh1 = p["wh1"].T @ dz1
            dh2 = p["wh2"].T @ dz2
