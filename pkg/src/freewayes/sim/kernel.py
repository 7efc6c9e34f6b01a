"""Compiled stepping kernel of the freeway simulator.

State is kept in struct-of-arrays form: ``vf`` holds float fields and ``vi``
integer fields, one column per vehicle.  Every lane keeps its vehicles in an
index list sorted by front position, leader first.  Lane 0 is the on-ramp and
acceleration lane; lanes 1..n are mainlanes counted from the right.

One step runs insertion, lane changes (decided sequentially against the
already-updated lane lists, at most one per vehicle), IDM accelerations from
the pre-move state, a leader-first position update with a hard no-overlap cap,
detector accumulation and exits.
"""
import math

import numpy as np
from numba import njit

INF = math.inf

# parameter slots
DT = 0
MAIN_LEN = 1
DVSL_START = 2
DVSL_END = 3
MERGE_START = 4
MERGE_END = 5
RAMP_START = 6
SIGNAL = 7
OFF_EXIT = 8
MAIN_LIMIT = 9
RAMP_LIMIT = 10
T_HEAD = 11
S0 = 12
DELTA = 13
B_COMPLY = 14
B_MAX = 15
GAP_SAFE = 16
LC_THRESH = 17
LC_POLITE = 18
LC_BSAFE = 19
LC_BURGENT = 20
LC_MINGAP = 21
LC_COOLDOWN = 22
MAND_DIST = 23
N_MAIN = 24
OFF_LANE_END = 25
OFF_LANES = 26
YIELD_DIST = 27
N_PARAMS = 28

# control slots; speed limit of mainlane l lives at C_DVSL + l - 1
C_GREEN = 0
C_LC_ALLOWED = 1
C_PREV_GREEN = 2
C_DVSL = 3

# float vehicle fields
X = 0
V = 1
XPREV = 2
LEN = 3
AMAX = 4
BCOMF = 5
VMAX = 6
VFACT = 7
ARRIVAL = 8
LAST_LC = 9
EXIT_T = 10
N_VF = 11

# int vehicle fields
ROUTE = 0
LANE = 1
STATUS = 2
SLOT = 3
MISSED = 4
RUNNER = 5
WANT = 6  # lane a blocked mandatory changer is waiting to enter, -1 if none
N_VI = 7

M2M, M2OFF, ON2M = 0, 1, 2
PENDING, ACTIVE, EXITED = 0, 1, 2

# counters
K_INJECTED = 0
K_EXITED = 1
K_EXIT_OFF = 2
K_EXIT_DOWN = 3
K_MISSED = 4
K_LC = 5
K_LC_LEFT2_MERGE = 6
K_LC_LEFT2_FORBIDDEN = 7
K_EMERGENCY = 8
K_ORDER = 9
K_MERGES = 10
N_COUNTERS = 11


@njit(cache=True)
def speed_limit(lane, x, prm, ctrl):
    if lane == 0:
        if x < prm[MERGE_START]:
            return prm[RAMP_LIMIT]
        return prm[MAIN_LIMIT]
    if prm[DVSL_START] <= x < prm[DVSL_END]:
        return ctrl[C_DVSL + lane - 1]
    return prm[MAIN_LIMIT]


@njit(cache=True)
def desired_speed(vf, i, lane, x, prm, ctrl):
    return min(vf[VFACT, i] * speed_limit(lane, x, prm, ctrl), vf[VMAX, i])


@njit(cache=True)
def idm(v, v0, amax, bcomf, has_lead, gap, v_lead, prm):
    dt = prm[DT]
    if v0 <= 0.0:
        free = -min(prm[B_COMPLY], v / dt)
    elif v <= v0:
        free = amax * (1.0 - (v / v0) ** prm[DELTA])
    else:
        free = -min(prm[B_COMPLY], (v - v0) / dt)
    if not has_lead:
        return free
    s_star = prm[S0] + max(0.0, v * prm[T_HEAD] + v * (v - v_lead) / (2.0 * math.sqrt(amax * bcomf)))
    g = max(gap, 0.01)
    return free - amax * (s_star / g) ** 2


@njit(cache=True)
def lane_obstacle(lane, x, runner, route, prm, ctrl):
    """Position of the nearest stationary obstacle ahead.

    Obstacles are the end of the acceleration lane, a red ramp signal, and,
    for off-ramp traffic not yet in an exit lane, the diverge point.
    """
    if lane != 0:
        if route == M2OFF and lane > prm[OFF_LANES] and x <= prm[OFF_EXIT] and prm[OFF_LANE_END] > 0.5:
            return prm[OFF_EXIT]
        return INF
    if ctrl[C_GREEN] < 0.5 and x <= prm[SIGNAL] and runner == 0:
        return prm[SIGNAL]
    return prm[MERGE_END]


@njit(cache=True)
def acc_behind(vf, vi, i, lane, x, j, prm, ctrl):
    """IDM acceleration of vehicle ``i`` placed at ``x`` in ``lane`` behind vehicle ``j`` (-1: none)."""
    v = vf[V, i]
    v0 = desired_speed(vf, i, lane, x, prm, ctrl)
    has = False
    gap = INF
    vl = 0.0
    if j >= 0:
        has = True
        gap = vf[X, j] - vf[LEN, j] - x
        vl = vf[V, j]
    xo = lane_obstacle(lane, x, vi[RUNNER, i], vi[ROUTE, i], prm, ctrl)
    if xo < INF and xo - x < gap:
        has = True
        gap = xo - x
        vl = 0.0
    return idm(v, v0, vf[AMAX, i], vf[BCOMF, i], has, gap, vl, prm)


@njit(cache=True)
def anticipation(vf, i, lane, x, v, prm, ctrl):
    """Deceleration needed to meet a lower limit at the next limit boundary ahead."""
    if lane == 0:
        return INF
    if x < prm[DVSL_START]:
        xb = prm[DVSL_START]
    elif x < prm[DVSL_END]:
        xb = prm[DVSL_END]
    else:
        return INF
    v_next = desired_speed(vf, i, lane, xb, prm, ctrl)
    dt = prm[DT]
    if xb - x <= (v + vf[AMAX, i] * dt) * dt:
        # the boundary may be crossed within this step
        return (v_next - v) / dt
    if v <= v_next:
        return INF
    return -(v * v - v_next * v_next) / (2.0 * (xb - x))


@njit(cache=True)
def yield_acc(vf, vi, i, lane, src, prm, ctrl, lane_ids, lane_n):
    """Acceleration of ``i`` when opening a gap for a blocked changer ahead in lane ``src``.

    The nearest vehicle within the yield distance ahead that waits to enter
    ``lane`` is considered.  Returns INF when there is nobody to yield to or
    yielding would need more than the comfortable deceleration.
    """
    x = vf[X, i]
    p = find_pos(lane_ids, lane_n, vf, src, x)
    reach = x + prm[YIELD_DIST]
    for q in range(p - 1, -1, -1):
        j = lane_ids[src, q]
        if vf[X, j] - vf[LEN, j] > reach:
            break
        if vi[WANT, j] != lane:
            continue
        gap = vf[X, j] - vf[LEN, j] - x
        if gap <= 0.0:
            continue
        a = idm(vf[V, i], desired_speed(vf, i, lane, x, prm, ctrl), vf[AMAX, i], vf[BCOMF, i], True,
                gap, vf[V, j], prm)
        if a < -vf[BCOMF, i]:
            return INF
        return a
    return INF


@njit(cache=True)
def gap_seek_acc(vf, vi, i, x, prm, ctrl, lane_ids, lane_n):
    """Acceleration of a blocked mandatory changer that drops behind the target-lane leader."""
    tgt = vi[WANT, i]
    if tgt < 0:
        return INF
    p = find_pos(lane_ids, lane_n, vf, tgt, x)
    if p == 0:
        return INF
    j = lane_ids[tgt, p - 1]
    gap = vf[X, j] - vf[LEN, j] - x
    if gap <= 0.0:
        # alongside the target leader: fall back gently
        if vf[V, i] > vf[V, j] - 1.0 and vf[V, i] > 1.0:
            return -0.5 * vf[BCOMF, i]
        return INF
    a = idm(vf[V, i], desired_speed(vf, i, tgt, x, prm, ctrl), vf[AMAX, i], vf[BCOMF, i], True,
            gap, vf[V, j], prm)
    return max(a, -vf[BCOMF, i])


@njit(cache=True)
def find_pos(lane_ids, lane_n, vf, lane, x):
    """Number of vehicles in ``lane`` whose front is at or ahead of ``x``."""
    lo = 0
    hi = lane_n[lane]
    while lo < hi:
        mid = (lo + hi) // 2
        if vf[X, lane_ids[lane, mid]] >= x:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def lane_insert(lane_ids, lane_n, vf, vi, lane, i):
    n = lane_n[lane]
    q = find_pos(lane_ids, lane_n, vf, lane, vf[X, i])
    for k in range(n, q, -1):
        lane_ids[lane, k] = lane_ids[lane, k - 1]
        vi[SLOT, lane_ids[lane, k]] = k
    lane_ids[lane, q] = i
    vi[SLOT, i] = q
    vi[LANE, i] = lane
    lane_n[lane] = n + 1


@njit(cache=True)
def lane_remove(lane_ids, lane_n, vi, lane, q):
    n = lane_n[lane]
    for k in range(q, n - 1):
        lane_ids[lane, k] = lane_ids[lane, k + 1]
        vi[SLOT, lane_ids[lane, k]] = k
    lane_n[lane] = n - 1


@njit(cache=True)
def try_insert(i, lane, prm, ctrl, vf, vi, lane_ids, lane_n):
    x_in = prm[RAMP_START] if lane == 0 else 0.0
    v_ins = desired_speed(vf, i, lane, x_in, prm, ctrl)
    n = lane_n[lane]
    if n > 0:
        j = lane_ids[lane, n - 1]
        gap = vf[X, j] - vf[LEN, j] - x_in
        v_ins = min(v_ins, vf[V, j])
        if gap < prm[S0] + v_ins * prm[T_HEAD]:
            return False
    if lane_obstacle(lane, x_in, 0, vi[ROUTE, i], prm, ctrl) - x_in < prm[S0]:
        return False
    vf[X, i] = x_in
    vf[XPREV, i] = x_in
    vf[V, i] = v_ins
    vf[LAST_LC, i] = -INF
    vi[STATUS, i] = ACTIVE
    vi[LANE, i] = lane
    vi[SLOT, i] = n
    lane_ids[lane, n] = i
    lane_n[lane] = n + 1
    return True


@njit(cache=True)
def evaluate_change(i, cur, tgt, mandatory, bsafe, prm, ctrl, vf, vi, lane_ids, lane_n):
    """Return (feasible, incentive) for moving vehicle ``i`` from lane ``cur`` to ``tgt``."""
    x = vf[X, i]
    ln = vf[LEN, i]
    q = vi[SLOT, i]
    p = find_pos(lane_ids, lane_n, vf, tgt, x)
    lead_t = lane_ids[tgt, p - 1] if p > 0 else -1
    fol_t = lane_ids[tgt, p] if p < lane_n[tgt] else -1
    if lead_t >= 0 and vf[X, lead_t] - vf[LEN, lead_t] - x < prm[LC_MINGAP]:
        return False, 0.0
    if fol_t >= 0 and x - ln - vf[X, fol_t] < prm[LC_MINGAP]:
        return False, 0.0
    acc_new = acc_behind(vf, vi, i, tgt, x, lead_t, prm, ctrl)
    if acc_new < -bsafe:
        return False, 0.0
    acc_ft_new = 0.0
    if fol_t >= 0:
        acc_ft_new = acc_behind(vf, vi, fol_t, tgt, vf[X, fol_t], i, prm, ctrl)
        if acc_ft_new < -bsafe:
            return False, 0.0
    if mandatory:
        return True, 0.0

    lead_c = lane_ids[cur, q - 1] if q > 0 else -1
    fol_c = lane_ids[cur, q + 1] if q + 1 < lane_n[cur] else -1
    gain = acc_new - acc_behind(vf, vi, i, cur, x, lead_c, prm, ctrl)
    polite = prm[LC_POLITE]
    if polite > 0.0:
        if fol_t >= 0:
            gain += polite * (acc_ft_new - acc_behind(vf, vi, fol_t, tgt, vf[X, fol_t], lead_t, prm, ctrl))
        if fol_c >= 0:
            xf = vf[X, fol_c]
            gain += polite * (acc_behind(vf, vi, fol_c, cur, xf, lead_c, prm, ctrl)
                              - acc_behind(vf, vi, fol_c, cur, xf, i, prm, ctrl))
    return gain > prm[LC_THRESH], gain


@njit(cache=True)
def lane_changes(t, prm, ctrl, vf, vi, lane_ids, lane_n, buf, keys, counters):
    n_main = int(prm[N_MAIN])
    m = 0
    for lane in range(n_main + 1):
        for q in range(lane_n[lane]):
            i = lane_ids[lane, q]
            buf[m] = i
            keys[m] = -vf[X, i]
            m += 1
    order = np.argsort(keys[:m], kind="mergesort")
    ms = prm[MERGE_START]
    me = prm[MERGE_END]
    off = prm[OFF_EXIT]
    bs = prm[LC_BSAFE]
    bu = prm[LC_BURGENT]
    allowed = ctrl[C_LC_ALLOWED] >= 0.5
    n_off = int(prm[OFF_LANES])
    for oi in range(m):
        i = buf[order[oi]]
        cur = vi[LANE, i]
        x = vf[X, i]
        in_merge = ms <= x < me
        route = vi[ROUTE, i]
        best = -1
        vi[WANT, i] = -1
        if cur == 0:
            if not in_merge:
                continue
            frac = (x - ms) / (me - ms)
            ok, _ = evaluate_change(i, 0, 1, True, bs + (bu - bs) * frac, prm, ctrl, vf, vi, lane_ids, lane_n)
            if ok:
                best = 1
            else:
                vi[WANT, i] = 1
        else:
            if not allowed and cur >= n_main - 1 and in_merge:
                continue
            if t - vf[LAST_LC, i] < prm[LC_COOLDOWN]:
                continue
            zone = prm[MAND_DIST] * (cur - n_off)
            if route == M2OFF and cur > n_off and x >= off - zone:
                frac = min(1.0, max(0.0, 1.0 - (off - x) / zone))
                ok, _ = evaluate_change(i, cur, cur - 1, True, bs + (bu - bs) * frac,
                                        prm, ctrl, vf, vi, lane_ids, lane_n)
                if ok:
                    best = cur - 1
                else:
                    vi[WANT, i] = cur - 1
            else:
                best_gain = -INF
                if cur > 1:
                    ok, gain = evaluate_change(i, cur, cur - 1, False, bs, prm, ctrl, vf, vi, lane_ids, lane_n)
                    if ok and gain > best_gain:
                        best = cur - 1
                        best_gain = gain
                exiting = route == M2OFF and x >= off - prm[MAND_DIST] * (n_main - n_off)
                if cur < n_main and not exiting:
                    ok, gain = evaluate_change(i, cur, cur + 1, False, bs, prm, ctrl, vf, vi, lane_ids, lane_n)
                    if ok and gain > best_gain:
                        best = cur + 1
                        best_gain = gain
        if best < 0:
            continue
        lane_remove(lane_ids, lane_n, vi, cur, vi[SLOT, i])
        lane_insert(lane_ids, lane_n, vf, vi, best, i)
        vf[LAST_LC, i] = t
        counters[K_LC] += 1
        if cur == 0:
            counters[K_MERGES] += 1
        if cur >= n_main - 1 and in_merge:
            counters[K_LC_LEFT2_MERGE] += 1
            if not allowed:
                counters[K_LC_LEFT2_FORBIDDEN] += 1


@njit(cache=True)
def advance(n_steps, step0, prm, ctrl, vf, vi, lane_ids, lane_n, queue_ids, queue_len, queue_head,
            det_lane, det_pos, exits, occ, spd, counters, buf, keys, acc):
    dt = prm[DT]
    n_main = int(prm[N_MAIN])
    n_lanes = n_main + 1
    n_det = det_lane.shape[0]
    for s in range(n_steps):
        k = step0 + s
        t = k * dt

        # vehicles that cannot stop when the ramp light turns red run through it
        if ctrl[C_GREEN] < 0.5 and ctrl[C_PREV_GREEN] >= 0.5:
            for q in range(lane_n[0]):
                i = lane_ids[0, q]
                d = prm[SIGNAL] - vf[X, i]
                if d >= 0.0 and vf[V, i] * vf[V, i] > 2.0 * prm[B_MAX] * d:
                    vi[RUNNER, i] = 1
        ctrl[C_PREV_GREEN] = ctrl[C_GREEN]

        for lane in range(n_lanes):
            h = queue_head[lane]
            if h < queue_len[lane]:
                i = queue_ids[lane, h]
                if vf[ARRIVAL, i] <= t and try_insert(i, lane, prm, ctrl, vf, vi, lane_ids, lane_n):
                    queue_head[lane] = h + 1
                    counters[K_INJECTED] += 1

        lane_changes(t, prm, ctrl, vf, vi, lane_ids, lane_n, buf, keys, counters)

        for lane in range(n_lanes):
            for q in range(lane_n[lane]):
                i = lane_ids[lane, q]
                j = lane_ids[lane, q - 1] if q > 0 else -1
                x = vf[X, i]
                a = acc_behind(vf, vi, i, lane, x, j, prm, ctrl)
                a_ant = anticipation(vf, i, lane, x, vf[V, i], prm, ctrl)
                if a_ant < a:
                    a = a_ant
                a = min(a, gap_seek_acc(vf, vi, i, x, prm, ctrl, lane_ids, lane_n))
                if lane >= 1:
                    if lane < n_main:
                        a = min(a, yield_acc(vf, vi, i, lane, lane + 1, prm, ctrl, lane_ids, lane_n))
                    if lane == 1:
                        a = min(a, yield_acc(vf, vi, i, lane, 0, prm, ctrl, lane_ids, lane_n))
                acc[i] = max(a, -prm[B_MAX])

        for lane in range(n_lanes):
            for q in range(lane_n[lane]):
                i = lane_ids[lane, q]
                x = vf[X, i]
                v = vf[V, i]
                vn = v + acc[i] * dt
                if vn < 0.0:
                    vn = 0.0
                cap = INF
                if q > 0:
                    j = lane_ids[lane, q - 1]
                    cap = (vf[X, j] - vf[LEN, j] - prm[GAP_SAFE] - x) / dt
                xo = lane_obstacle(lane, x, vi[RUNNER, i], vi[ROUTE, i], prm, ctrl)
                if xo < INF:
                    cap = min(cap, (xo - prm[GAP_SAFE] - x) / dt)
                if vn > cap:
                    vn = max(cap, 0.0)
                    if (v - vn) / dt > prm[B_MAX] + 1e-9:
                        counters[K_EMERGENCY] += 1
                vf[XPREV, i] = x
                vf[X, i] = x + vn * dt
                vf[V, i] = vn

        for d in range(n_det):
            lane = det_lane[d]
            p = det_pos[d]
            for q in range(lane_n[lane]):
                i = lane_ids[lane, q]
                x1 = vf[X, i]
                if x1 < p:
                    break
                x0 = vf[XPREV, i]
                ln = vf[LEN, i]
                if x0 >= p + ln:
                    continue
                if x1 > x0:
                    ov = min(x1, p + ln) - max(x0, p)
                    if ov > 0.0:
                        tau = ov / (x1 - x0) * dt
                        occ[k, d] += tau
                        spd[k, d] += tau * vf[V, i]
                elif p <= x0:
                    occ[k, d] += dt

        for lane in range(1, n_lanes):
            q = 0
            while q < lane_n[lane]:
                i = lane_ids[lane, q]
                x = vf[X, i]
                kind = 0
                if x >= prm[MAIN_LEN]:
                    kind = 2
                elif vi[ROUTE, i] == M2OFF and x >= prm[OFF_EXIT]:
                    # the split is route-determined: a late vehicle still takes the ramp
                    kind = 1
                    if lane > prm[OFF_LANES]:
                        vi[MISSED, i] = 1
                        counters[K_MISSED] += 1
                if kind == 0:
                    q += 1
                    continue
                lane_remove(lane_ids, lane_n, vi, lane, q)
                vi[STATUS, i] = EXITED
                vf[EXIT_T, i] = t + dt
                exits[k] += 1
                counters[K_EXITED] += 1
                counters[K_EXIT_OFF if kind == 1 else K_EXIT_DOWN] += 1

        for lane in range(n_lanes):
            for q in range(1, lane_n[lane]):
                j = lane_ids[lane, q - 1]
                i = lane_ids[lane, q]
                if not vf[X, i] < vf[X, j] - vf[LEN, j]:
                    counters[K_ORDER] += 1
