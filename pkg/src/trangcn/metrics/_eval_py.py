"""Pure-Python fallback for the compiled ranking scan; identical semantics."""
import numpy as np


def evaluate_order(order, q_ids, g_ids, q_cams, g_cams, cam_filter=True):
    """Per query: 0-based position of the first match, average precision, relevant count.

    Queries without any relevant gallery item get ``first = -1`` and ``ap = nan``.
    """
    num_q = order.shape[0]
    first = np.full(num_q, -1, dtype=np.int64)
    ap = np.full(num_q, np.nan, dtype=np.float64)
    nrel = np.zeros(num_q, dtype=np.int64)
    for i in range(num_q):
        ranked = order[i]
        ids = g_ids[ranked]
        if cam_filter:
            ids = ids[~((ids == q_ids[i]) & (g_cams[ranked] == q_cams[i]))]
        positions = np.flatnonzero(ids == q_ids[i])
        if positions.size == 0:
            continue
        first[i] = positions[0]
        prec_sum = 0.0
        for hits, pos in enumerate(positions, 1):
            prec_sum += hits / (pos + 1)
        ap[i] = prec_sum / positions.size
        nrel[i] = positions.size
    return first, ap, nrel
