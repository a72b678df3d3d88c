"""Numba kernels for the backfitting tree sampler.

A forest is a set of 2-D arrays with one row per tree and one column per node
slot. Slot 0 is the root. Leaves have ``var == -1``; unused slots have
``active == 0`` and default values everywhere. ``bins`` is the (p, n) matrix
of integer bins from :meth:`CutpointGrid.bin`, so a row goes left at a node
with rule ``(j, c)`` iff ``bins[j, i] <= c``.

Leaf models are weighted: row ``i`` contributes ``w[i] * m_leaf`` to the fit,
so leaf sufficient statistics are ``n_b = sum w^2`` and ``s_b = sum w r``.
Plain BART uses ``w = 1``; the treatment forest of BCF uses ``w = s * z``.
"""

import math

from numba import njit

GROW = 0
PRUNE = 1


@njit(cache=True)
def split_prob(depth, eta, beta):
    return eta * (1.0 + depth) ** (-beta)


@njit(cache=True)
def log_marginal_leaf(n_b, s_b, sigma2, sm2):
    """Leaf likelihood with the leaf mean integrated out (row constants dropped)."""
    if n_b <= 0.0 or sm2 <= 0.0:
        return 0.0
    denom = sigma2 + n_b * sm2
    return 0.5 * math.log(sigma2 / denom) + sm2 * s_b * s_b / (2.0 * sigma2 * denom)


@njit(cache=True)
def node_ranges(var, cut, left, parent, node, ncuts, lo, hi):
    """Available cut indices ``lo[j] <= c < hi[j]`` for every column at ``node``."""
    for j in range(ncuts.shape[0]):
        lo[j] = 0
        hi[j] = ncuts[j]
    child = node
    a = parent[node]
    while a >= 0:
        j = var[a]
        if left[a] == child:
            if cut[a] < hi[j]:
                hi[j] = cut[a]
        elif cut[a] + 1 > lo[j]:
            lo[j] = cut[a] + 1
        child = a
        a = parent[a]


@njit(cache=True)
def count_avail(lo, hi):
    k = 0
    for j in range(lo.shape[0]):
        if hi[j] > lo[j]:
            k += 1
    return k


@njit(cache=True)
def pick_avail(lo, hi, k):
    """Index of the ``k``-th column (0-based) with a nonempty cut range."""
    for j in range(lo.shape[0]):
        if hi[j] > lo[j]:
            if k == 0:
                return j
            k -= 1
    return -1


@njit(cache=True)
def list_growable(var, cut, left, parent, active, ncuts, lo, hi, out):
    g = 0
    for k in range(var.shape[0]):
        if active[k] and var[k] < 0:
            node_ranges(var, cut, left, parent, k, ncuts, lo, hi)
            if count_avail(lo, hi) > 0:
                out[g] = k
                g += 1
    return g


@njit(cache=True)
def list_nogs(var, left, right, active, out):
    """Internal nodes whose two children are both leaves."""
    g = 0
    for k in range(var.shape[0]):
        if active[k] and var[k] >= 0 and var[left[k]] < 0 and var[right[k]] < 0:
            out[g] = k
            g += 1
    return g


@njit(cache=True)
def child_split_prob(depth, n_avail, eta, beta):
    if n_avail == 0:
        return 0.0
    return split_prob(depth, eta, beta)


@njit(cache=True)
def split_log_prior_ratio(var_j, c, lo, hi, n_vars, depth, eta, beta):
    """log p(tree with node split) - log p(tree with node as leaf).

    ``lo``/``hi`` are the ranges at the node being split by rule (var_j, c).
    """
    n_cuts = hi[var_j] - lo[var_j]
    n_left = n_vars - 1 + (1 if c > lo[var_j] else 0)
    n_right = n_vars - 1 + (1 if hi[var_j] > c + 1 else 0)
    ps = split_prob(depth, eta, beta)
    pl = child_split_prob(depth + 1, n_left, eta, beta)
    pr = child_split_prob(depth + 1, n_right, eta, beta)
    return (math.log(ps) - math.log(n_vars) - math.log(n_cuts)
            + math.log(1.0 - pl) + math.log(1.0 - pr) - math.log(1.0 - ps))


@njit(cache=True)
def find_free(active, start):
    for k in range(start, active.shape[0]):
        if not active[k]:
            return k
    return -1


@njit(cache=True)
def apply_grow(var, cut, left, right, parent, depth, value, active, node, j, c, a, b):
    var[node] = j
    cut[node] = c
    left[node] = a
    right[node] = b
    for k in (a, b):
        active[k] = 1
        var[k] = -1
        cut[k] = -1
        left[k] = -1
        right[k] = -1
        parent[k] = node
        depth[k] = depth[node] + 1
        value[k] = 0.0


@njit(cache=True)
def clear_slot(var, cut, left, right, parent, depth, value, active, k):
    active[k] = 0
    var[k] = -1
    cut[k] = -1
    left[k] = -1
    right[k] = -1
    parent[k] = -1
    depth[k] = 0
    value[k] = 0.0


@njit(cache=True)
def apply_prune(var, cut, left, right, parent, depth, value, active, node):
    clear_slot(var, cut, left, right, parent, depth, value, active, left[node])
    clear_slot(var, cut, left, right, parent, depth, value, active, right[node])
    var[node] = -1
    cut[node] = -1
    left[node] = -1
    right[node] = -1
    value[node] = 0.0


@njit(cache=True)
def grow_proposal(var, cut, left, right, parent, depth, active, ncuts, eta, beta,
                  u_leaf, u_var, u_cut, lo, hi, scratch):
    """Draw a GROW move from three uniforms without modifying the tree.

    Returns ``(ok, node, j, c, a, b, log_proposal_ratio, log_prior_ratio)``;
    ``ok`` is False when no leaf can be grown or capacity is exhausted.
    """
    g = list_growable(var, cut, left, parent, active, ncuts, lo, hi, scratch)
    if g == 0:
        return False, -1, -1, -1, -1, -1, 0.0, 0.0
    a = find_free(active, 1)
    b = find_free(active, a + 1) if a >= 0 else -1
    if b < 0:
        return False, -1, -1, -1, -1, -1, 0.0, 0.0
    node = scratch[min(int(u_leaf * g), g - 1)]
    node_ranges(var, cut, left, parent, node, ncuts, lo, hi)
    n_vars = count_avail(lo, hi)
    j = pick_avail(lo, hi, min(int(u_var * n_vars), n_vars - 1))
    n_cuts = hi[j] - lo[j]
    c = lo[j] + min(int(u_cut * n_cuts), n_cuts - 1)
    # reverse move prunes the new node; the parent stops being prunable
    n_nog = list_nogs(var, left, right, active, scratch) + 1
    p = parent[node]
    if p >= 0:
        sib = right[p] if left[p] == node else left[p]
        if var[sib] < 0:
            n_nog -= 1
    log_prior = split_log_prior_ratio(j, c, lo, hi, n_vars, depth[node], eta, beta)
    log_prop = math.log(g) + math.log(n_vars) + math.log(n_cuts) - math.log(n_nog)
    return True, node, j, c, a, b, log_prop, log_prior


@njit(cache=True)
def prune_proposal(var, cut, left, right, parent, depth, active, ncuts, eta, beta,
                   u_node, lo, hi, scratch):
    """Draw a PRUNE move from one uniform without modifying the tree.

    Returns ``(ok, node, log_proposal_ratio, log_prior_ratio)``.
    """
    n_nog = list_nogs(var, left, right, active, scratch)
    if n_nog == 0:
        return False, -1, 0.0, 0.0
    node = scratch[min(int(u_node * n_nog), n_nog - 1)]
    g = list_growable(var, cut, left, parent, active, ncuts, lo, hi, scratch)
    for ch in (left[node], right[node]):
        node_ranges(var, cut, left, parent, ch, ncuts, lo, hi)
        if count_avail(lo, hi) > 0:
            g -= 1
    g += 1
    node_ranges(var, cut, left, parent, node, ncuts, lo, hi)
    n_vars = count_avail(lo, hi)
    j = var[node]
    n_cuts = hi[j] - lo[j]
    log_prior = -split_log_prior_ratio(j, cut[node], lo, hi, n_vars, depth[node], eta, beta)
    log_prop = math.log(n_nog) - math.log(g) - math.log(n_vars) - math.log(n_cuts)
    return True, node, log_prop, log_prior


@njit(cache=True)
def update_tree_kernel(t, var, cut, left, right, parent, depth, value, active, leaf_of,
                       bins, ncuts, resid, fit, w, sigma, sigma_m, eta, beta, use_lik,
                       rng, lo, hi, scratch, nb, sb, stats):
    """One backfitting update of tree ``t``: MH on structure, then leaf redraw.

    ``resid`` and ``fit`` are updated in place; ``stats`` accumulates
    (grow proposed, grow accepted, prune proposed, prune accepted).
    """
    n = resid.shape[0]
    tv = var[t]
    tc = cut[t]
    tl = left[t]
    tr = right[t]
    tp = parent[t]
    td = depth[t]
    tval = value[t]
    tact = active[t]
    lf = leaf_of[t]
    # partial residual excluding this tree
    for i in range(n):
        m = tval[lf[i]]
        resid[i] += w[i] * m
        fit[i] -= m
    sigma2 = sigma * sigma
    sm2 = sigma_m * sigma_m

    if rng.random() < 0.5:
        stats[0] += 1
        ok, node, j, c, a, b, log_prop, log_prior = grow_proposal(
            tv, tc, tl, tr, tp, td, tact, ncuts, eta, beta,
            rng.random(), rng.random(), rng.random(), lo, hi, scratch)
        if ok:
            nl = 0.0
            sl = 0.0
            nr = 0.0
            sr = 0.0
            for i in range(n):
                if lf[i] == node:
                    wi = w[i]
                    if bins[j, i] <= c:
                        nl += wi * wi
                        sl += wi * resid[i]
                    else:
                        nr += wi * wi
                        sr += wi * resid[i]
            if use_lik and (nl <= 0.0 or nr <= 0.0):
                ok = False
            if ok:
                dlik = 0.0
                if use_lik:
                    dlik = (log_marginal_leaf(nl, sl, sigma2, sm2)
                            + log_marginal_leaf(nr, sr, sigma2, sm2)
                            - log_marginal_leaf(nl + nr, sl + sr, sigma2, sm2))
                if math.log(rng.random()) < dlik + log_prior + log_prop:
                    stats[1] += 1
                    apply_grow(tv, tc, tl, tr, tp, td, tval, tact, node, j, c, a, b)
                    for i in range(n):
                        if lf[i] == node:
                            lf[i] = a if bins[j, i] <= c else b
    else:
        stats[2] += 1
        ok, node, log_prop, log_prior = prune_proposal(
            tv, tc, tl, tr, tp, td, tact, ncuts, eta, beta, rng.random(), lo, hi, scratch)
        if ok:
            a = tl[node]
            b = tr[node]
            dlik = 0.0
            if use_lik:
                nl = 0.0
                sl = 0.0
                nr = 0.0
                sr = 0.0
                for i in range(n):
                    li = lf[i]
                    if li == a:
                        nl += w[i] * w[i]
                        sl += w[i] * resid[i]
                    elif li == b:
                        nr += w[i] * w[i]
                        sr += w[i] * resid[i]
                dlik = (log_marginal_leaf(nl + nr, sl + sr, sigma2, sm2)
                        - log_marginal_leaf(nl, sl, sigma2, sm2)
                        - log_marginal_leaf(nr, sr, sigma2, sm2))
            if math.log(rng.random()) < dlik + log_prior + log_prop:
                stats[3] += 1
                apply_prune(tv, tc, tl, tr, tp, td, tval, tact, node)
                for i in range(n):
                    li = lf[i]
                    if li == a or li == b:
                        lf[i] = node

    # leaf values from their exact Gaussian conditional
    cap = tv.shape[0]
    for k in range(cap):
        nb[k] = 0.0
        sb[k] = 0.0
    if use_lik:
        for i in range(n):
            k = lf[i]
            nb[k] += w[i] * w[i]
            sb[k] += w[i] * resid[i]
    for k in range(cap):
        if tact[k] and tv[k] < 0:
            denom = sigma2 + nb[k] * sm2
            mean = sm2 * sb[k] / denom
            sd = math.sqrt(sigma2 * sm2 / denom)
            tval[k] = mean + sd * rng.standard_normal()
    for i in range(n):
        m = tval[lf[i]]
        resid[i] -= w[i] * m
        fit[i] += m


@njit(cache=True)
def sweep_kernel(var, cut, left, right, parent, depth, value, active, leaf_of, bins, ncuts,
                 resid, fit, w, sigma, sigma_m, eta, beta, use_lik, rng, lo, hi, scratch,
                 nb, sb, stats):
    for t in range(var.shape[0]):
        update_tree_kernel(t, var, cut, left, right, parent, depth, value, active, leaf_of,
                           bins, ncuts, resid, fit, w, sigma, sigma_m, eta, beta, use_lik,
                           rng, lo, hi, scratch, nb, sb, stats)


@njit(cache=True)
def route(var, cut, left, right, bins, i, zcol, zbin):
    node = 0
    while var[node] >= 0:
        j = var[node]
        b = zbin if j == zcol else bins[j, i]
        node = left[node] if b <= cut[node] else right[node]
    return node


@njit(cache=True)
def predict_kernel(var, cut, left, right, value, bins, out):
    """``out[i] = sum_t g_t(x_i)`` by routing each row down every tree."""
    n = bins.shape[1]
    for i in range(n):
        out[i] = 0.0
    for t in range(var.shape[0]):
        tv = var[t]
        for i in range(n):
            out[i] += value[t, route(tv, cut[t], left[t], right[t], bins, i, -1, 0)]


@njit(cache=True)
def leaf_index_kernel(var, cut, left, right, bins, out):
    for t in range(var.shape[0]):
        for i in range(bins.shape[1]):
            out[t, i] = route(var[t], cut[t], left[t], right[t], bins, i, -1, 0)


@njit(cache=True)
def contrast_kernel(var, cut, left, right, value, active, bins, zcol, out):
    """``out[i] = f(x_i, z=1) - f(x_i, z=0)`` where ``zcol`` is the 0/1 column.

    Trees that never split on ``zcol`` contribute exactly zero.
    """
    n = bins.shape[1]
    for i in range(n):
        out[i] = 0.0
    for t in range(var.shape[0]):
        uses = False
        for k in range(var.shape[1]):
            if active[t, k] and var[t, k] == zcol:
                uses = True
                break
        if not uses:
            continue
        tv = var[t]
        for i in range(n):
            n1 = route(tv, cut[t], left[t], right[t], bins, i, zcol, 1)
            n0 = route(tv, cut[t], left[t], right[t], bins, i, zcol, 0)
            out[i] += value[t, n1] - value[t, n0]


@njit(cache=True)
def _lower_truncated_normal(a, rng):
    """Standard normal draw conditioned on ``x > a``."""
    if a < 0.45:
        while True:
            x = rng.standard_normal()
            if x > a:
                return x
    # exponential proposal with the optimal rate
    lam = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        x = a - math.log(rng.random()) / lam
        if math.log(rng.random()) <= -0.5 * (x - lam) ** 2:
            return x


@njit(cache=True)
def probit_latent_kernel(mean, z, rng, out):
    """Latent ``w_i ~ N(mean_i, 1)`` truncated to ``w > 0`` when ``z_i = 1`` and
    ``w <= 0`` otherwise."""
    for i in range(mean.shape[0]):
        if z[i] == 1:
            out[i] = mean[i] + _lower_truncated_normal(-mean[i], rng)
        else:
            out[i] = mean[i] - _lower_truncated_normal(mean[i], rng)
