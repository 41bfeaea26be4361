"""Independent reference implementations used as test oracles.

These deliberately avoid the package's vectorised code paths: plain Python
sets, loops and exhaustive enumeration.
"""

from fractions import Fraction

import numpy as np


def jaccard_set_loss(mistakes: frozenset, fg: frozenset) -> float:
    """Jaccard loss of a mistake set: |M| / |F u M| (0 for the empty set)."""
    if not mistakes:
        return 0.0
    return len(mistakes) / len(fg | mistakes)


def lovasz_extension(errors, fg) -> float:
    """Lovász extension by integrating level sets: sum over thresholds of width * Delta({m >= t})."""
    errors = [float(e) for e in errors]
    fg = frozenset(fg)
    levels = sorted(set(errors))
    total, prev = 0.0, 0.0
    for t in levels:
        if t <= 0:
            continue
        level_set = frozenset(n for n, e in enumerate(errors) if e >= t)
        total += (t - prev) * jaccard_set_loss(level_set, fg)
        prev = t
    return total


def lovasz_softmax_oracle(probs, targets) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    targets = list(int(t) for t in targets)
    vals = []
    for c in sorted(set(targets)):
        fg = {n for n, t in enumerate(targets) if t == c}
        errs = [(1.0 - probs[n, c]) if n in fg else probs[n, c] for n in range(len(targets))]
        vals.append(lovasz_extension(errs, fg))
    return sum(vals) / len(vals) if vals else 0.0


def iou_oracle(pred, gt, n_classes, ignore=None):
    """Per-class IoU from explicit point-index sets; None where the union is empty."""
    keep = [n for n in range(len(gt)) if gt[n] != ignore]
    out = []
    for c in range(n_classes):
        P = {n for n in keep if pred[n] == c}
        G = {n for n in keep if gt[n] == c}
        U = P | G
        out.append(Fraction(len(P & G), len(U)) if U else None)
    return out


def _segments(labels, instance, is_thing, c, keep):
    segs = {}
    for n in keep:
        if labels[n] != c:
            continue
        if is_thing:
            if instance[n] == 0:
                continue
            segs.setdefault(int(instance[n]), set()).add(n)
        else:
            segs.setdefault(0, set()).add(n)
    return list(segs.values())


def _best_matching(ious):
    """Exhaustive search over injective gt->pred matchings restricted to IoU > 1/2.

    Maximises (number of matches, summed IoU) lexicographically.
    """
    n_g = len(ious)
    n_p = len(ious[0]) if n_g else 0
    best = (0, Fraction(0), ())

    def rec(g, used, count, total, pairs):
        nonlocal best
        if g == n_g:
            if (count, total) > best[:2]:
                best = (count, total, tuple(pairs))
            return
        rec(g + 1, used, count, total, pairs)
        for p in range(n_p):
            if p not in used and ious[g][p] > Fraction(1, 2):
                rec(g + 1, used | {p}, count + 1, total + ious[g][p], pairs + [(g, p)])

    rec(0, frozenset(), 0, Fraction(0), [])
    return best


def panoptic_oracle(pred_label, pred_inst, gt_label, gt_inst, thing_flags, ignore):
    """Per-class (tp, fp, fn, iou_sum as Fraction) via sets and exhaustive matching."""
    keep = [n for n in range(len(gt_label)) if gt_label[n] != ignore]
    out = []
    for c, is_thing in enumerate(thing_flags):
        ps = _segments(pred_label, pred_inst, is_thing, c, keep)
        gs = _segments(gt_label, gt_inst, is_thing, c, keep)
        ious = [[Fraction(len(g & p), len(g | p)) for p in ps] for g in gs]
        count, total, _ = _best_matching(ious)
        out.append((count, len(ps) - count, len(gs) - count, total))
    return out


def brute_box_contains(box, p):
    """Axis-interval check after rotating the point into the box frame, pure Python."""
    import math

    dx, dy, dz = p[0] - box.cx, p[1] - box.cy, p[2] - box.cz
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x, y = c * dx + s * dy, -s * dx + c * dy
    return abs(x) <= box.l / 2 and abs(y) <= box.w / 2 and abs(dz) <= box.h / 2


def all_matchings_equal_greedy(ious):
    """True when the only optimal matching is the set of all pairs with IoU > 1/2."""
    greedy = {(g, p) for g, row in enumerate(ious) for p, v in enumerate(row) if v > Fraction(1, 2)}
    return set(_best_matching(ious)[2]) == greedy

