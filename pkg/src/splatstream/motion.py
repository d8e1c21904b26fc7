"""Motion partitioning: probe gradients against a frozen model, then split
anchors into dynamic and static via a two-component univariate GMM.

The probe compares the current frame against renders of the frozen model
under a plain squared-error image loss, averages each anchor's screen-space
gradient magnitude over views and iterations, and fits the mixture to those
per-anchor means. Anchors whose posterior under the higher-mean component
exceeds a threshold are dynamic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera
from .rasterizer import RenderSettings, render, render_backward

EM_TOL = 1e-8
EM_MAX_ITER = 200
VAR_FLOOR_REL = 1e-12  # relative to the data variance
# Components closer than this many bulk standard deviations are treated as
# one effective component (no motion signal); keeps a static frame's
# fit-error gradients from being split into a phantom "dynamic" cluster.
SEPARATION_SIGMAS = 5.0


@dataclass
class GradientLedger:
    """Per-anchor accumulated screen-gradient statistics over a window.

    `obs_count` records how often each anchor was actually selected for a
    probe render; anchors never observed carry no motion evidence and stay
    out of the mixture fit.
    """

    ids: np.ndarray                    # (n,) anchor ids
    grad_sum: np.ndarray               # (n,)
    obs_count: np.ndarray              # (n,) views the anchor appeared in
    count: int = 0
    window: int = 30

    @classmethod
    def empty(cls, ids: np.ndarray, window: int) -> "GradientLedger":
        n = len(ids)
        return cls(ids=np.asarray(ids, dtype=np.int64),
                   grad_sum=np.zeros(n), obs_count=np.zeros(n, dtype=np.int64),
                   count=0, window=window)

    def add(self, values: np.ndarray, observed_rows: np.ndarray | None = None):
        self.grad_sum = self.grad_sum + values
        if observed_rows is not None:
            self.obs_count[observed_rows] += 1
        else:
            self.obs_count += 1
        self.count += 1

    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("ledger is empty")
        return self.grad_sum / self.count

    def observed(self) -> np.ndarray:
        return self.obs_count > 0

    def reset(self):
        self.grad_sum = np.zeros_like(self.grad_sum)
        self.obs_count = np.zeros_like(self.obs_count)
        self.count = 0


@dataclass
class Gmm2:
    """Two-component univariate Gaussian mixture (canonicalized m1 <= m2)."""

    weights: np.ndarray    # (2,)
    means: np.ndarray      # (2,)
    variances: np.ndarray  # (2,)
    log_likelihoods: list[float] = field(default_factory=list)
    effective_components: int = 2

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        return (
            -0.5 * np.log(2.0 * np.pi * self.variances)
            - 0.5 * (x - self.means) ** 2 / self.variances
        )

    def posteriors(self, x: np.ndarray) -> np.ndarray:
        """Responsibilities (n, 2), rows summing to one."""
        log_p = self.log_pdf(x) + np.log(self.weights)
        log_p -= log_p.max(axis=1, keepdims=True)
        p = np.exp(log_p)
        return p / p.sum(axis=1, keepdims=True)

    def log_likelihood(self, x: np.ndarray) -> float:
        log_p = self.log_pdf(x) + np.log(self.weights)
        m = log_p.max(axis=1, keepdims=True)
        return float(np.sum(m[:, 0] + np.log(np.exp(log_p - m).sum(axis=1))))


def fit_gmm(values: np.ndarray) -> Gmm2:
    """EM fit with percentile initialization and a relative variance floor."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("need at least two values")

    data_var = float(np.var(x))
    if data_var == 0.0:
        # All values identical: a single effective component, no motion signal.
        v = max(abs(float(x[0])) * VAR_FLOOR_REL, np.finfo(np.float64).tiny)
        return Gmm2(
            weights=np.array([0.5, 0.5]),
            means=np.array([float(x[0]), float(x[0])]),
            variances=np.array([v, v]),
            effective_components=1,
        )

    floor = VAR_FLOOR_REL * data_var
    means = np.percentile(x, [10.0, 90.0]).astype(np.float64)
    variances = np.array([data_var, data_var])
    weights = np.array([0.5, 0.5])
    gmm = Gmm2(weights=weights, means=means, variances=variances)

    prev_ll = -np.inf
    for _ in range(EM_MAX_ITER):
        resp = gmm.posteriors(x)
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        gmm.weights = nk / x.size
        gmm.means = (resp * x[:, None]).sum(axis=0) / nk
        diff2 = (x[:, None] - gmm.means) ** 2
        gmm.variances = np.maximum((resp * diff2).sum(axis=0) / nk, floor)
        ll = gmm.log_likelihood(x)
        gmm.log_likelihoods.append(ll)
        if ll - prev_ll < EM_TOL and np.isfinite(prev_ll):
            break
        prev_ll = ll

    if gmm.means[0] > gmm.means[1]:
        order = np.array([1, 0])
        gmm.weights = gmm.weights[order]
        gmm.means = gmm.means[order]
        gmm.variances = gmm.variances[order]

    # Effective-component check: the high-mean cluster only counts as a
    # motion signal when it sits clearly outside the low cluster's spread.
    sep = gmm.means[1] - gmm.means[0]
    if sep <= SEPARATION_SIGMAS * np.sqrt(gmm.variances[0]) or min(gmm.weights) < 1e-6:
        gmm.effective_components = 1
    return gmm


def classify_dynamic(
    gmm: Gmm2, ledger: GradientLedger, rho: float, hierarchy=None
) -> tuple[np.ndarray, np.ndarray]:
    """Split ledger anchors into (dynamic ids, static ids) by posterior.

    Only observed anchors can be dynamic; unobserved ones default to static.
    """
    if not 0.5 < rho < 1.0:
        raise ValueError("rho must lie in (0.5, 1)")
    values = ledger.mean()
    if gmm.effective_components == 1:
        dyn_mask = np.zeros(values.shape[0], dtype=bool)
    else:
        dyn_mask = (gmm.posteriors(values)[:, 1] > rho) & ledger.observed()
    dyn_ids = ledger.ids[dyn_mask]
    static_ids = ledger.ids[~dyn_mask]
    if hierarchy is not None:
        rows = _rows_for(hierarchy, ledger.ids)
        hierarchy.dynamic[rows] = dyn_mask
    return dyn_ids, static_ids


def _rows_for(hierarchy, ids: np.ndarray) -> np.ndarray:
    lookup = {int(a): i for i, a in enumerate(hierarchy.ids)}
    return np.array([lookup[int(a)] for a in ids], dtype=np.int64)


def accumulate_motion_gradients(
    model,
    cams: list[Camera],
    current_frames: list[np.ndarray],
    settings: RenderSettings,
    window: int,
) -> GradientLedger:
    """Probe Eq.-style squared-error gradients of current frames against the
    frozen model's renders, averaged per anchor over views and the window."""
    h = model.hierarchy
    ledger = GradientLedger.empty(h.ids.copy(), window)
    for cam, frame in zip(cams, current_frames):
        if frame.shape != (cam.height, cam.width, 3):
            raise ValueError("view shape mismatch")
    n_views = len(cams)
    # The probed model is frozen and the renders carry no randomness, so every
    # window iteration produces the identical per-anchor value; compute it
    # once and accumulate it `window` times.
    per_anchor = np.zeros(len(h))
    seen = np.zeros(len(h), dtype=bool)
    for cam, frame in zip(cams, current_frames):
        rows = np.nonzero(h.select_mask(cam))[0]
        if rows.size == 0:
            continue
        seen[rows] = True
        batch, _ = model.decode_rows(rows, cam)
        out = render(batch, cam, settings)
        # d/dI of sum((I_t - I)^2)
        d_image = 2.0 * (out.image - frame)
        render_backward(out, d_image)
        mags = out.screen_grad.reshape(rows.size, h.config.k)
        per_anchor[rows] += mags.mean(axis=1)
    seen_rows = np.nonzero(seen)[0]
    for _ in range(window):
        ledger.add(per_anchor / n_views, observed_rows=seen_rows)
    return ledger


def write_partition(path, ledger: GradientLedger, gmm: Gmm2, dyn_ids: np.ndarray):
    """Diagnostic dump: one `anchor_id,state,grad_mean,posterior` line each."""
    values = ledger.mean()
    if gmm.effective_components == 1:
        post = np.zeros(values.shape[0])
    else:
        post = gmm.posteriors(values)[:, 1]
    dyn = set(int(i) for i in dyn_ids)
    with open(path, "w") as f:
        for aid, v, p in zip(ledger.ids, values, post):
            state = "dynamic" if int(aid) in dyn else "static"
            f.write(f"{int(aid)},{state},{v:.9g},{p:.9g}\n")
