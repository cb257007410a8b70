"""Independent slow reference evaluations used by the tests.

Everything here is plain Python loops over lists on purpose: these must not
share code paths with the vectorized implementations they check.
"""
import math


def supcon_bruteforce(Z, labels, tau, variant="in"):
    """Direct summation of the supervised contrastive objective."""
    n = len(Z)

    def dot(u, v):
        return sum(a * b for a, b in zip(u, v))

    total = 0.0
    for i in range(n):
        pos = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        denom = sum(math.exp(dot(Z[i], Z[a]) / tau) for a in range(n) if a != i)
        if variant == "in":
            inner = sum(math.exp(dot(Z[i], Z[p]) / tau) / denom for p in pos) / len(pos)
            total += -math.log(inner)
        else:
            total += -sum(math.log(math.exp(dot(Z[i], Z[p]) / tau) / denom) for p in pos) / len(pos)
    return total


def bce(y, p):
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def cross_entropy_direct(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        z = sum(math.exp(v) for v in row)
        total += -math.log(math.exp(row[y]) / z)
    return total / len(labels)


def confusion_bruteforce(y_true, y_pred):
    tp = tn = fp = fn = 0
    for t, p in zip(y_true, y_pred):
        if t == 1 and p == 1:
            tp += 1
        elif t == 0 and p == 0:
            tn += 1
        elif t == 0 and p == 1:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def auc_concordance(y_true, scores):
    """P(score_pos > score_neg) with ties worth one half, by full enumeration."""
    pos = [s for s, y in zip(scores, y_true) if y == 1]
    neg = [s for s, y in zip(scores, y_true) if y == 0]
    credit = 0.0
    for a in pos:
        for b in neg:
            if a > b:
                credit += 1.0
            elif a == b:
                credit += 0.5
    return credit / (len(pos) * len(neg))
