"""Result persistence: delimited draw/summary/diagnostic files and figures.

Floats are written with repr, which round-trips exactly in both directions:
re-reading a draws file recovers bit-identical values, and identical runs
produce byte-identical files.

Interaction columns hold the coefficient of the monomial x_j x_l: the
diagonal of the induced matrix as-is for squared terms, twice the
off-diagonal entry for cross terms, so a reported value is directly the
slope change per unit of the product.
"""

import csv
import os

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def interaction_pairs(p):
    return [(j, l) for j in range(p) for l in range(j, p)]


def term_names(exposures, covariates=()):
    names = [f"main:{c}" for c in exposures]
    names += [f"int:{exposures[j]}:{exposures[l]}" for j, l in interaction_pairs(len(exposures))]
    names += [f"covint:{c}:{z}" for c in exposures for z in covariates]
    return names


def coefficient_matrix(chains):
    """Stack kept draws of all reported coefficients from one or more
    chains: columns follow term_names order, prefixed by intercept and the
    response noise variance.  Returns (header, array, chain_col, draw_col)."""
    first = chains[0]
    p = first.beta.shape[1]
    q = first.alpha_draws.shape[1] if first.alpha_draws is not None else 0
    pairs = interaction_pairs(p)
    blocks, chain_col, draw_col = [], [], []
    for c, ch in enumerate(chains):
        m = ch.n_kept
        cols = [ch.intercept[:, None], ch.sigma2_draws[:, None], ch.beta]
        mono = np.empty((m, len(pairs)))
        for t, (j, l) in enumerate(pairs):
            mono[:, t] = ch.omega_x[:, j, l] * (1.0 if j == l else 2.0)
        cols.append(mono)
        if q:
            cols.append(ch.alpha_draws)
            cols.append(ch.covint.reshape(m, p * q))
        blocks.append(np.hstack(cols))
        chain_col.extend([c] * m)
        draw_col.extend(range(m))
    return np.vstack(blocks), np.asarray(chain_col), np.asarray(draw_col)


def coefficient_header(exposures, covariates=()):
    head = ["intercept", "sigma2"]
    head += [f"main:{c}" for c in exposures]
    head += [f"int:{exposures[j]}:{exposures[l]}"
             for j, l in interaction_pairs(len(exposures))]
    if covariates:
        head += [f"covmain:{z}" for z in covariates]
        head += [f"covint:{c}:{z}" for c in exposures for z in covariates]
    return head


def write_draws(path, chains, exposures, covariates=()):
    values, chain_col, draw_col = coefficient_matrix(chains)
    header = ["chain", "draw"] + coefficient_header(exposures, covariates)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(values.shape[0]):
            w.writerow([int(chain_col[i]), int(draw_col[i])]
                       + [repr(float(v)) for v in values[i]])
    return header


def read_draws(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    body = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    chain_col = np.array([int(r[0]) for r in rows[1:]])
    return header, body, chain_col


def summarize(values, names, level=0.95):
    """Per-column posterior summary with the sparsified point estimate:
    mean, zeroed when the equal-tailed interval at `level` covers zero."""
    tail = 0.5 * (1.0 - level)
    lo = np.quantile(values, tail, axis=0)
    hi = np.quantile(values, 1.0 - tail, axis=0)
    mean = values.mean(axis=0)
    sd = values.std(axis=0, ddof=1)
    point = np.where((lo <= 0.0) & (hi >= 0.0), 0.0, mean)
    return [{"term": nm, "mean": mean[i], "sd": sd[i], "lo": lo[i],
             "hi": hi[i], "point": point[i]} for i, nm in enumerate(names)]


def write_summary(path, rows, level):
    lo_name = f"q{100 * (1 - level) / 2:g}"
    hi_name = f"q{100 * (1 + level) / 2:g}"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["term", "mean", "sd", lo_name, hi_name, "point"])
        for r in rows:
            w.writerow([r["term"]] + [repr(float(r[k]))
                                      for k in ("mean", "sd", "lo", "hi", "point")])


def write_diagnostics(path, chains, exposures):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "seed", "accept_rate_eta", "mala_step_final"]
                   + [f"ess_main:{c}" for c in exposures])
        for c, ch in enumerate(chains):
            w.writerow([c, ch.seed, repr(float(ch.accept_rate_eta)),
                        repr(float(ch.mala_step_final))]
                       + [repr(float(v)) for v in ch.ess_beta])
        pooled_ess = np.sum([ch.ess_beta for ch in chains], axis=0)
        acc = float(np.mean([ch.accept_rate_eta for ch in chains]))
        w.writerow(["pooled", "", repr(acc), ""]
                   + [repr(float(v)) for v in pooled_ess])


def write_loadings(path, chains, exposures):
    """Posterior-mean loadings, pooled across chains.  The factor model is
    invariant to rotating the factors, so these values identify a subspace,
    not unique axes; the filename carries the warning."""
    lam = np.mean([ch.loadings_mean for ch in chains], axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["exposure"] + [f"factor{h + 1}" for h in range(lam.shape[1])])
        for j, name in enumerate(exposures):
            w.writerow([name] + [repr(float(v)) for v in lam[j]])


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def figure_main_effects(summary_rows, path):
    rows = [r for r in summary_rows if r["term"].startswith("main:")]
    labels = [r["term"].split(":", 1)[1] for r in rows]
    mean = np.array([r["mean"] for r in rows])
    lo = np.array([r["lo"] for r in rows])
    hi = np.array([r["hi"] for r in rows])
    selected = np.array([r["point"] != 0.0 for r in rows])
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(rows)), 4))
    ax.axhline(0.0, color="0.6", lw=0.8)
    colors = np.where(selected, "C3", "C0")
    ax.errorbar(x, mean, yerr=[mean - lo, hi - mean], fmt="none",
                ecolor="0.4", elinewidth=1)
    ax.scatter(x, mean, c=colors, s=18, zorder=3)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_ylabel("main effect")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def figure_interactions(summary_rows, exposures, path):
    p = len(exposures)
    mat = np.zeros((p, p))
    idx = {name: j for j, name in enumerate(exposures)}
    for r in summary_rows:
        if not r["term"].startswith("int:"):
            continue
        _, a, b = r["term"].split(":", 2)
        j, l = idx[a], idx[b]
        mat[j, l] = mat[l, j] = r["point"]
    vmax = np.max(np.abs(mat)) or 1.0
    fig, ax = plt.subplots(figsize=(max(5, 0.3 * p), max(4, 0.3 * p)))
    masked = np.ma.masked_where(mat == 0.0, mat)
    im = ax.imshow(masked, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
    ax.set_xticks(range(p))
    ax.set_yticks(range(p))
    ax.set_xticklabels(exposures, rotation=90, fontsize=7)
    ax.set_yticklabels(exposures, fontsize=7)
    fig.colorbar(im, ax=ax, label="interaction coefficient")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def figure_scree(singular_values, chosen_k, path):
    v = np.asarray(singular_values, dtype=float)
    frac = np.cumsum(v) / v.sum()
    x = np.arange(1, v.size + 1)
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(x, v, "o-", ms=4)
    ax1.set_xlabel("component")
    ax1.set_ylabel("singular value")
    ax2 = ax1.twinx()
    ax2.plot(x, frac, "C1s--", ms=3)
    ax2.axhline(0.9, color="0.6", lw=0.8)
    ax2.set_ylabel("cumulative fraction")
    ax1.axvline(chosen_k, color="C3", lw=1)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def figure_metrics_box(reports, path):
    keys_err = ["test_mse", "main_mse", "frobenius"]
    keys_rate = ["tp_main", "tn_main", "tp_interaction", "tn_interaction"]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.boxplot([[r.as_dict()[k] for r in reports] for k in keys_err],
                tick_labels=keys_err)
    ax1.set_ylabel("error")
    ax2.boxplot([[r.as_dict()[k] for r in reports] for k in keys_rate],
                tick_labels=keys_rate)
    ax2.set_ylim(-0.05, 1.05)
    ax2.set_ylabel("rate")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_metrics(path, reports, extra_columns=None):
    """One row per replicate; extra_columns maps name -> list of values."""
    extra = extra_columns or {}
    keys = list(reports[0].as_dict())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(extra) + keys)
        for i, r in enumerate(reports):
            row = [extra[k][i] for k in extra]
            row += [repr(float(v)) for v in r.as_dict().values()]
            w.writerow(row)


def ensure_outdir(path):
    os.makedirs(path, exist_ok=True)
    return path
