"""Independent reference implementations used by the tests.

These deliberately avoid the package's own helpers: plain loops, plain
lists, one step at a time.
"""

from __future__ import annotations

import math

import numpy as np


# -- attention ---------------------------------------------------------------

def naive_attention_row(q, keys, values):
    """Softmax attention of one query over rows of ``keys`` with explicit loops."""
    d = len(q)
    logits = [sum(q[f] * k[f] for f in range(d)) / math.sqrt(d) for k in keys]
    m = max(logits)
    w = [math.exp(x - m) for x in logits]
    z = sum(w)
    return np.array([sum(w[j] * values[j][f] for j in range(len(keys))) / z for f in range(d)])


def naive_causal(Q, K, V):
    return np.array([naive_attention_row(Q[i], K[: i + 1], V[: i + 1]) for i in range(len(Q))])


# -- policy oracle -----------------------------------------------------

class PolicyOracle:
    """Literal transcription of the generation-phase policy.

    ``KV_h`` and ``KV_l`` are lists of token ids; ``score`` maps a token id to
    its significance. Each call handles one candidate leaving the window.
    """

    def __init__(self, alpha_h, alpha_l, low_enabled=True):
        self.alpha_h = alpha_h
        self.alpha_l = alpha_l
        self.low_enabled = low_enabled
        self.KV_h = []
        self.KV_l = []
        self.pruned = []
        self.log = []

    @staticmethod
    def argmin(section, score):
        # lowest score, oldest token on ties
        return min(section, key=lambda t: (score[t], t))

    def step(self, t_c, score, N):
        hi = self.alpha_h / N
        lo = self.alpha_l / N
        if not self.low_enabled:
            hi = lo
        if score[t_c] >= hi:
            self.KV_h.append(t_c)
            t_v = self.argmin(self.KV_h, score)
            if lo <= score[t_v] < hi:
                self.KV_h.remove(t_v)
                self.KV_l.append(t_v)
                self.log.append((t_c, "high", t_v, "downgrade"))
            elif score[t_v] < lo:
                self.KV_h.remove(t_v)
                self.pruned.append(t_v)
                self.log.append((t_c, "high", t_v, "prune"))
            else:
                self.log.append((t_c, "high", t_v, "retain"))
        elif score[t_c] >= lo:
            self.KV_l.append(t_c)
            t_v = self.argmin(self.KV_l, score)
            if score[t_v] < lo:
                self.KV_l.remove(t_v)
                self.pruned.append(t_v)
                self.log.append((t_c, "low", t_v, "prune"))
            else:
                self.log.append((t_c, "low", t_v, "retain"))
        else:
            self.pruned.append(t_c)
            self.log.append((t_c, "pruned", None, None))


def decision_tuple(d):
    return (d.candidate, d.placement.value, d.victim, None if d.victim_action is None else d.victim_action.value)


# -- free list ---------------------------------------------------------------

class SequentialFreeList:
    """Ring of page ids processed one head at a time, in plan order."""

    def __init__(self, n):
        self.ring = list(range(n))
        self.start = 0
        self.end = n
        self.tables = {}

    def step(self, plans):
        """``plans``: list of (key, n_high, n_low, freed) already in canonical order."""
        n = len(self.ring)
        free_before = self.end - self.start
        a = f = 0
        for key, n_high, n_low, freed in plans:
            table = self.tables.setdefault(key, ([], []))
            for pid in freed:
                if pid in table[0]:
                    table[0].remove(pid)
                else:
                    table[1].remove(pid)
                self.ring[(self.end + f) % n] = pid
                f += 1
            for i in range(n_high + n_low):
                assert a < free_before
                pid = self.ring[(self.start + a) % n]
                a += 1
                (table[0] if i < n_high else table[1]).append(pid)
        self.start += a
        self.end += f

    def free_ids(self):
        n = len(self.ring)
        return [self.ring[i % n] for i in range(self.start, self.end)]


# -- layouts -----------------------------------------------------------------

def naive_pack_keys(x, F, N, k_vec, k_group):
    out = []
    for c in range(F // (k_vec * k_group)):
        for t in range(N):
            for g in range(k_group):
                for v in range(k_vec):
                    out.append(x[t][c * k_vec * k_group + g * k_vec + v])
    return np.array(out, dtype=np.asarray(x).dtype)


def naive_pack_values(x, F, N, v_vec, v_group):
    padded = -(-N // v_vec) * v_vec
    out = []
    for a in range(F // v_group):
        for b in range(padded // v_vec):
            for g in range(v_group):
                for v in range(v_vec):
                    t = b * v_vec + v
                    out.append(x[t][a * v_group + g] if t < N else 0)
    return np.array(out, dtype=np.asarray(x).dtype)


# -- misc --------------------------------------------------------------------

def brute_critical_count(mass, target):
    s = sorted(mass, reverse=True)
    total = sum(s)
    for k in range(1, len(s) + 1):
        if math.fsum(s[:k]) >= target * total * (1 - 1e-12):
            return k
    return len(s)
