"""Independent reference implementations used as test oracles.

These are written from the definitions with plain Python loops and share no
code with the package under test.
"""

from fractions import Fraction


def pair_count_auc(is_positive, scores):
    """(concordant + ties/2) / (positives x negatives), by brute force."""
    pos = [s for p, s in zip(is_positive, scores) if p]
    neg = [s for p, s in zip(is_positive, scores) if not p]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def weighted_mean(vectors, counts):
    """Sample-count-weighted mean, element by element, with exact rational weights."""
    n_total = sum(counts)
    dim = len(vectors[0])
    out = []
    for j in range(dim):
        acc = Fraction(0)
        for vec, n in zip(vectors, counts):
            acc += Fraction(n, n_total) * Fraction(float(vec[j]))
        out.append(float(acc))
    return out


def confusion_f1(labels, preds):
    """Per-class F1 from an explicit confusion matrix over labels U preds."""
    classes = sorted(set(labels) | set(preds))
    f1 = {}
    for c in classes:
        tp = sum(1 for y, p in zip(labels, preds) if y == c and p == c)
        fp = sum(1 for y, p in zip(labels, preds) if y != c and p == c)
        fn = sum(1 for y, p in zip(labels, preds) if y == c and p != c)
        f1[c] = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
    return f1
