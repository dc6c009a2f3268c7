"""Small, slow, independent re-implementations used to freeze expected values."""

import math
from collections import defaultdict

NULL = "<null>"


def ibm1_em(pairs, iterations, prior=None):
    """Dictionary IBM Model 1: t[s][w] = p(w | s), NULL on the source side."""
    pairs = [(s.split(), t.split()) for s, t in pairs]
    tgt_vocab = sorted({w for _, t in pairs for w in t})
    src_vocab = [NULL] + sorted({w for s, _ in pairs for w in s})
    table = {s: {w: 1.0 / len(tgt_vocab) for w in tgt_vocab} for s in src_vocab}
    for _ in range(iterations):
        counts = {s: defaultdict(float) for s in src_vocab}
        for src, tgt in pairs:
            src = [NULL] + src
            for w in tgt:
                z = sum(table[s][w] for s in src)
                for s in src:
                    counts[s][w] += table[s][w] / z
        for (s, w), c in (prior or {}).items():
            if s in counts and w in tgt_vocab:
                counts[s][w] += c
        for s in src_vocab:
            total = sum(counts[s].values())
            if total > 0:
                table[s] = {w: counts[s][w] / total for w in tgt_vocab}
    return table


def ibm1_log_likelihood(table, pairs):
    ll = 0.0
    for s, t in pairs:
        src = [NULL] + s.split()
        for w in t.split():
            ll += math.log(sum(table[x].get(w, 0.0) for x in src) / len(src))
    return ll


def grow_diag_reference(forward, reverse, src_len, tgt_len):
    """Literal transcription of the textbook loop, kept separate from the package."""
    union = set(forward) | set(reverse)
    alignment = set(forward) & set(reverse)
    neighbors = [(-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)]
    changed = True
    while changed:
        changed = False
        for e in range(src_len):
            for f in range(tgt_len):
                if (e, f) in alignment:
                    for de, df in neighbors:
                        e2, f2 = e + de, f + df
                        e_free = all(a[0] != e2 for a in alignment)
                        f_free = all(a[1] != f2 for a in alignment)
                        if (e_free or f_free) and (e2, f2) in union and (e2, f2) not in alignment:
                            alignment.add((e2, f2))
                            changed = True
    return alignment
