"""Independent reference implementations used as test oracles.

Deliberately naive: python loops, no shared code with the package.
"""

import math


def brute_rank(query, gallery_vecs, gallery_ids):
    scored = []
    for vec, gid in zip(gallery_vecs, gallery_ids):
        d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(query, vec)))
        scored.append((d, gid))
    scored.sort()
    return [gid for _, gid in scored]


def pr_curve_ap(relevant_flags):
    """AP as the step-wise area under the precision/recall curve."""
    total = sum(relevant_flags)
    area, prev_recall, hits = 0.0, 0.0, 0
    for k, rel in enumerate(relevant_flags, 1):
        hits += rel
        precision = hits / k
        recall = hits / total
        area += precision * (recall - prev_recall)
        prev_recall = recall
    return area


def brute_recall(relevant_flags, k):
    return 1.0 if any(relevant_flags[:k]) else 0.0


def brute_metrics(q_vecs, q_labels, g_vecs, g_labels, g_ids, ks):
    label_of = dict(zip(g_ids, g_labels))
    recalls = {k: 0.0 for k in ks}
    ap = 0.0
    for qv, ql in zip(q_vecs, q_labels):
        order = brute_rank(qv, g_vecs, g_ids)
        flags = [int(label_of[g] == ql) for g in order]
        for k in ks:
            recalls[k] += brute_recall(flags, k)
        ap += pr_curve_ap(flags)
    n = len(q_vecs)
    return {k: v / n for k, v in recalls.items()}, ap / n


def reflect_crop_1d(row, p):
    """Hand simulation of mirror padding by p then cropping back to length."""
    row = list(row)
    n = len(row)
    if p > 0:
        padded = row[:p][::-1] + row
        return padded[:n]
    if p < 0:
        q = -p
        padded = row + row[n - q :][::-1]
        return padded[q:]
    return row
