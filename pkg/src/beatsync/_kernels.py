"""Compiled inner loop for the detector's dead time and afterpulsing.

Both effects depend on the previously *recorded* event, so they are applied in one
sequential pass over time-sorted primary clicks.
"""

from __future__ import annotations

import heapq

import numpy as np
from numba import njit

CAUSE_QUBIT = 0
CAUSE_DARK = 1
CAUSE_AFTERPULSE = 2


@njit(cache=True)
def _detector_pass(times, causes, rounds, u_ap, eps, p_ap, t_dead, last_t, has_last,
                   pend_t, pend_r, flush):
    n = times.shape[0]
    cap = 2 * n + pend_t.shape[0] + 1  # every primary may add one afterpulse
    out_t = np.empty(cap, np.int64)
    out_c = np.empty(cap, np.uint8)
    out_r = np.empty(cap, np.int64)
    suppressed = np.zeros(3, np.int64)
    heap = [(np.int64(0), np.int64(0))]
    heap.pop()
    for k in range(pend_t.shape[0]):
        heapq.heappush(heap, (pend_t[k], pend_r[k]))
    m = 0
    for i in range(n):
        t = times[i]
        while len(heap) > 0 and heap[0][0] < t:
            ta, ra = heapq.heappop(heap)
            if has_last and ta - last_t <= t_dead:
                suppressed[CAUSE_AFTERPULSE] += 1
            else:
                out_t[m] = ta
                out_c[m] = CAUSE_AFTERPULSE
                out_r[m] = ra
                m += 1
                last_t = ta
                has_last = True
        if has_last and t - last_t <= t_dead:
            suppressed[causes[i]] += 1
            continue
        out_t[m] = t
        out_c[m] = causes[i]
        out_r[m] = rounds[i]
        m += 1
        last_t = t
        has_last = True
        if u_ap[i] < p_ap:
            heapq.heappush(heap, (t + t_dead + eps[i], rounds[i]))
    if flush:
        while len(heap) > 0:
            ta, ra = heapq.heappop(heap)
            if has_last and ta - last_t <= t_dead:
                suppressed[CAUSE_AFTERPULSE] += 1
            else:
                out_t[m] = ta
                out_c[m] = CAUSE_AFTERPULSE
                out_r[m] = ra
                m += 1
                last_t = ta
                has_last = True
    rest_t = np.empty(len(heap), np.int64)
    rest_r = np.empty(len(heap), np.int64)
    for k in range(len(heap)):
        rest_t[k] = heap[k][0]
        rest_r[k] = heap[k][1]
    return out_t[:m], out_c[:m], out_r[:m], suppressed, last_t, has_last, rest_t, rest_r


def detector_pass(times, causes, rounds, u_ap, eps, p_ap, t_dead, state, flush=False):
    """Apply dead time and afterpulsing to sorted primary clicks.

    ``state`` is a dict carrying ``last_t``, ``has_last`` and the pending afterpulse
    heap between calls; it is updated in place.  Returns ``(tags, causes, rounds,
    suppressed_by_cause)``.
    """
    out_t, out_c, out_r, supp, last_t, has_last, rest_t, rest_r = _detector_pass(
        np.ascontiguousarray(times, np.int64),
        np.ascontiguousarray(causes, np.uint8),
        np.ascontiguousarray(rounds, np.int64),
        np.ascontiguousarray(u_ap, np.float64),
        np.ascontiguousarray(eps, np.int64),
        float(p_ap),
        np.int64(t_dead),
        np.int64(state["last_t"]),
        bool(state["has_last"]),
        state["pend_t"],
        state["pend_r"],
        bool(flush),
    )
    state.update(last_t=int(last_t), has_last=bool(has_last), pend_t=rest_t, pend_r=rest_r)
    return out_t, out_c, out_r, supp


def new_detector_state() -> dict:
    return {
        "last_t": 0,
        "has_last": False,
        "pend_t": np.empty(0, np.int64),
        "pend_r": np.empty(0, np.int64),
    }
