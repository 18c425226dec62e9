"""Reference implementations written independently of the package code."""
import itertools
from fractions import Fraction

import numpy as np

from idcloak import imaging


def reference_ssim(a, b):
    """Loop-based SSIM written from the textbook definition."""
    a, b = imaging.as_image(a), imaging.as_image(b)
    h, w, c = a.shape
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    k = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5 ** 2))
    k /= k.sum()

    def windows(n):
        if n < 11:
            return [(0, n, np.full(n, 1.0 / n))]
        return [(i, i + 11, k) for i in range(n - 10)]

    vals = []
    for ch in range(c):
        for r0, r1, wr in windows(h):
            for c0, c1_, wc in windows(w):
                wgt = np.outer(wr, wc)
                pa, pb = a[r0:r1, c0:c1_, ch], b[r0:r1, c0:c1_, ch]
                ma, mb = (wgt * pa).sum(), (wgt * pb).sum()
                va = (wgt * (pa - ma) ** 2).sum()
                vb = (wgt * (pb - mb) ** 2).sum()
                cov = (wgt * (pa - ma) * (pb - mb)).sum()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                            / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def brute_lambda(team, focal, sets):
    """Pairwise counting straight from the definition, no distribution step."""
    negs = sets[focal]
    if not negs:
        return Fraction(0)
    others = [m for m in team if m != focal]
    k = len(others)
    if k == 1:
        return Fraction(sum(x in sets[others[0]] for x in negs), len(negs))
    single = Fraction(0)
    pair = Fraction(0)
    for x in negs:
        single += Fraction(sum(x in sets[o] for o in others), k)
        pair += Fraction(sum(x in sets[a] and x in sets[b]
                             for a, b in itertools.permutations(others, 2)), k * (k - 1))
    return Fraction(0) if single == 0 else pair / single


def brute_d(team, sets):
    return sum(1 - brute_lambda(team, f, sets) for f in team) / len(team)


def brute_best(sets, size):
    """Most diverse team by full enumeration; ties go to the smallest sorted id list."""
    scored = [(brute_d(t, sets), t) for t in itertools.combinations(sorted(sets), size)]
    top = max(d for d, _ in scored)
    return top, min(t for d, t in scored if d == top)
