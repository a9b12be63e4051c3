"""Collaboration analysis between the gate and supervision heads,
correlation statistics with native Student-t p-values, block-wise
explanation-quality maps, and the ReLU entropy-reduction check.

For a block l with a successor, two gradients of the shared channel mixer
w1 are compared: the one contributed by block l's own supervision loss and
the one arriving from block l+1's loss through the gated side chain. Their
cosine is the collaboration strength.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics as met
from . import saliency as sal_mod
from .errors import (ConfigurationError, ContractError,
                     UndefinedCorrelationError)

COSINE_EPS = 1e-8


@dataclass
class CollabRecord:
    sample_id: int
    site: int
    cosine: float
    p_orig: float
    sad_drop: float


@dataclass
class CorrelationResult:
    r: float
    t: float
    p: float
    n: int


@dataclass
class CorrelationRow:
    pair: str
    site: int | None
    result: CorrelationResult


# ---------------------------------------------------------------------------
# gradient cosine


def _cosine(a, b, eps=COSINE_EPS):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + eps))


def _head_loss(rec, site, label, linear_class=None):
    logits = rec.head_logits()[site]
    if linear_class is None:
        return ad.softmax_cross_entropy(logits, [label])
    onehot = np.zeros(logits.data.shape)
    onehot[..., linear_class] = 1.0
    return ad.sum_axis(ad.mul(logits, onehot))


def site_gradient_pair(model, x, label, site, site_mask=None, linear_class=None):
    """Gradients of the two consecutive head losses with respect to the
    measured block's shared mixer w1.

    Returns (from_own_head, from_next_head); ``site_mask`` optionally
    restricts the block input spatially. ``linear_class`` swaps the
    cross-entropy for the raw class logit (linear in the features), used by
    the additivity oracle.
    """
    if site + 1 >= len(model.sites):
        raise ContractError(f"site {site} has no successor block")
    rec = model.forward_collect(x, site_mask=(site, site_mask) if site_mask is not None else None)
    w1 = model.params[f"mhex{site}.w1"]
    loss_own = _head_loss(rec, site, label, linear_class)
    loss_next = _head_loss(rec, site + 1, label, linear_class)
    return ad.grad_wrt(loss_own, w1).data, ad.grad_wrt(loss_next, w1).data


def collaboration_cosine(model, x, label, site):
    """Cosine similarity between the two supervision gradients sharing block
    ``site``'s w1; 0 when both gradients vanish (epsilon guard)."""
    g_ds, g_ag = site_gradient_pair(model, x, label, site)
    return _cosine(g_ag, g_ds)


def blockwise_quality(model, x, label, grid=7, site=0):
    """Per-cell collaboration cosine with the block input masked to the
    cell's region, as a (grid, grid) map."""
    if grid < 1:
        raise ConfigurationError("grid must be >= 1")
    rec = model.forward_collect(x)
    feat_shape = rec.site_inputs[site].data.shape[-2:]
    h, w = feat_shape
    if grid > min(h, w):
        raise ConfigurationError(
            f"grid {grid} exceeds site feature resolution {h}x{w}")
    rows = (np.arange(h) * grid) // h
    cols = (np.arange(w) * grid) // w
    out = np.empty((grid, grid))
    for gi in range(grid):
        for gj in range(grid):
            mask = np.zeros((h, w))
            mask[np.ix_(rows == gi, cols == gj)] = 1.0
            g_ds, g_ag = site_gradient_pair(model, x, label, site, site_mask=mask)
            out[gi, gj] = _cosine(g_ag, g_ds)
    return out


# ---------------------------------------------------------------------------
# Pearson r with native t-distribution p-value


def _betacf(a, b, x):
    """Continued fraction for the regularized incomplete beta (modified
    Lentz), absolute tolerance 1e-15 per step, well under the 1e-10 goal."""
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise RuntimeError("incomplete beta continued fraction failed to converge")


def betainc_reg(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                     + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t, df):
    """P(|T| >= |t|) for a Student-t variable with ``df`` degrees of freedom."""
    if not math.isfinite(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def pearson(x, y):
    """Sample correlation with the two-sided p-value of the no-correlation
    t-test (n - 2 degrees of freedom)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n != len(y) or n < 3:
        raise ContractError("pearson needs two equal-length lists with n >= 3")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance in a correlation input")
    r = float(xc @ yc) / (sx * sy)
    r = min(1.0, max(-1.0, r))
    # snap away the last-ulp rounding of sqrt so exact linear dependence
    # reports |r| = 1
    if abs(r) > 1.0 - 4e-16:
        r = math.copysign(1.0, r)
    if abs(r) == 1.0:
        t = math.inf if r > 0 else -math.inf
    else:
        t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return CorrelationResult(r=r, t=t, p=student_t_two_sided_p(t, n - 2), n=n)


# ---------------------------------------------------------------------------
# triangle report


def collect_collab_records(model, dataset, n_samples=None, wf_cfg=None, sites=None):
    """Per-sample collaboration, confidence and soft-mask drop for the
    measured sites (the last three blocks having a successor by default)."""
    if sites is None:
        with_succ = list(range(len(model.sites) - 1))
        sites = with_succ[-3:]
    n = len(dataset) if n_samples is None else min(n_samples, len(dataset))
    if n < 3:
        raise ContractError("need at least 3 evaluable samples")
    wf_cfg = wf_cfg or sal_mod.WeightFilterConfig()
    records = []
    for i in range(n):
        image = dataset.images[i]
        label = int(dataset.labels[i])
        smap = sal_mod.explain_image(model, image, label, wf_cfg)
        cam = sal_mod.resize_map(smap.grid, image.shape[-2:])
        rec = met.drop_record(model, image, label, cam, sample_id=i, mode="soft")
        for s in sites:
            cos = collaboration_cosine(model, image, label, s)
            records.append(CollabRecord(sample_id=i, site=s, cosine=cos,
                                        p_orig=rec.p_orig, sad_drop=rec.drop))
    return records


def correlation_triangle(model, dataset, n_samples=None, wf_cfg=None):
    """The seven-entry report: per measured site, collaboration vs soft
    drop and collaboration vs confidence; plus one soft-drop vs confidence
    entry. Zero-variance series raise UndefinedCorrelationError."""
    records = collect_collab_records(model, dataset, n_samples, wf_cfg)
    sites = sorted({r.site for r in records})
    rows = []
    for s in sites:
        cos = [r.cosine for r in records if r.site == s]
        sad = [r.sad_drop for r in records if r.site == s]
        po = [r.p_orig for r in records if r.site == s]
        rows.append(CorrelationRow("cosine_vs_sad", s, pearson(cos, sad)))
        rows.append(CorrelationRow("cosine_vs_p_orig", s, pearson(cos, po)))
    first = sites[0]
    sad = [r.sad_drop for r in records if r.site == first]
    po = [r.p_orig for r in records if r.site == first]
    rows.append(CorrelationRow("sad_vs_p_orig", None, pearson(sad, po)))
    return rows, records


def write_correlation_csv(rows, out_path):
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "site", "r", "t", "p", "n"])
        for row in rows:
            res = row.result
            writer.writerow([row.pair, "" if row.site is None else row.site,
                             f"{res.r:.6g}", f"{res.t:.6g}", f"{res.p:.6g}", res.n])
    return out_path


# ---------------------------------------------------------------------------
# entropy reduction and small-sample statistics


def _hist_entropy(samples, bins):
    counts, edges = np.histogram(samples, bins=bins)
    p = counts / counts.sum()
    widths = np.diff(edges)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz] / widths[nz])).sum())


def relu_entropy_drop(n_samples=1_000_000, bins=200, seed=0):
    """Monte-Carlo estimate of the entropy removed by rectifying a standard
    normal: differential entropy of the input minus the mixed entropy
    (point mass at zero plus truncated continuous part) of the output."""
    n_samples = int(n_samples)
    if n_samples < 100_000:
        raise ConfigurationError("relu_entropy_drop needs n_samples >= 1e5")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    z = rng.standard_normal(n_samples)
    h_in = _hist_entropy(z, bins)
    p0 = float((z <= 0).mean())
    h_discrete = -p0 * math.log(p0)
    h_continuous = _hist_entropy(z[z > 0], bins)
    return h_in - (h_discrete + h_continuous)


def sign_test_p(greater, less):
    """Exact one-sided sign test: probability of at least ``greater`` wins
    out of ``greater + less`` fair coin flips (ties excluded by caller)."""
    n = greater + less
    if n == 0:
        raise ContractError("sign test needs at least one untied pair")
    return float(sum(math.comb(n, k) for k in range(greater, n + 1)) / 2.0 ** n)
