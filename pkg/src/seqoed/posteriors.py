"""Amortized posterior predictors conditioned on experiment histories.

Three network families approximate posteriors given the history
``I_k = [d_0, y_0, ..., d_{k-1}, y_{k-1}]``:

* :class:`ModelPosteriorNet` — categorical over candidate models via a
  log-softmax head;
* :class:`GmmNet` — independent Gaussian mixture (optionally truncated
  per dimension) whose weights/means/stds are network outputs mapped
  affinely into problem-specific ranges;
* :class:`FlowNet` — conditional coupling-layer flow with a standard
  normal base distribution.

Histories are encoded two ways: posterior nets take the stage-interleaved
flat vector of length ``k (N_d + N_y)`` (so each stage's net has its own
input width), while the actor/critic take a fixed-width zero-padded layout
(designs block, then observations block) prefixed with a one-hot stage
indicator — see :func:`encode_history` and :func:`encode_policy_input`.

:class:`PredictorSet` bundles one net per (stage, target, model) as the
reward mode requires — the terminal mode needs predictors only at the final
stage, the incremental mode at every stage ``1..N`` — and pins the stage-0
"posterior" to the prior.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels, nn, prob

LOG_FLOOR = prob.LOG_DENSITY_FLOOR


# ---------------------------------------------------------------------------
# History encodings
# ---------------------------------------------------------------------------


def _scaled_obs(observations, obs_scale):
    return observations if obs_scale is None else obs_scale(observations)


def encode_history(designs, observations, obs_scale=None):
    """Interleaved flat history: ``[d_0, y_0, ..., d_{k-1}, y_{k-1}]``.

    ``designs`` (n, k, N_d), ``observations`` (n, k, N_y); returns
    (n, k (N_d + N_y)).  ``obs_scale`` is applied to observations only.
    """
    designs = np.asarray(designs, dtype=np.float64)
    observations = np.asarray(observations, dtype=np.float64)
    n, k = designs.shape[0], designs.shape[1]
    if observations.shape[:2] != (n, k):
        raise ValueError("designs/observations stage counts differ")
    if k == 0:
        return np.zeros((n, 0))
    obs = _scaled_obs(observations, obs_scale)
    return np.concatenate([designs, obs], axis=2).reshape(n, -1)


def decode_history(enc, design_dim, obs_dim):
    """Inverse of :func:`encode_history` (with ``obs_scale=None``)."""
    enc = np.asarray(enc, dtype=np.float64)
    step = design_dim + obs_dim
    if enc.shape[1] % step != 0:
        raise ValueError("encoding length is not a multiple of one stage")
    stages = enc.reshape(enc.shape[0], -1, step)
    return stages[:, :, :design_dim].copy(), stages[:, :, design_dim:].copy()


def encode_policy_input(spec, stage, designs, observations, obs_scale=None):
    """Fixed-width actor input ``[e_k | d-block | y-block]``.

    ``e_k`` is the one-hot stage indicator of length ``N``; the design and
    observation blocks hold stages ``0..k-1`` zero-padded to ``N-1`` stages
    each (stage ``N-1`` is the last one an action is taken at).  Total width
    ``N + (N-1)(N_d + N_y)``.
    """
    designs = np.asarray(designs, dtype=np.float64)
    observations = np.asarray(observations, dtype=np.float64)
    n, k = designs.shape[0], designs.shape[1]
    horizon, n_d, n_y = spec.horizon, spec.design_dim, spec.obs_dim
    if not 0 <= stage <= horizon - 1 or k != stage:
        raise ValueError(f"stage {stage} inconsistent with {k} recorded steps")
    out = np.zeros((n, horizon + (horizon - 1) * (n_d + n_y)))
    out[:, stage] = 1.0
    if k:
        obs = _scaled_obs(observations, obs_scale)
        d_start = horizon
        y_start = horizon + (horizon - 1) * n_d
        out[:, d_start:d_start + k * n_d] = designs.reshape(n, -1)
        out[:, y_start:y_start + k * n_y] = obs.reshape(n, -1)
    return out


def policy_input_dim(spec) -> int:
    return spec.horizon + (spec.horizon - 1) * (spec.design_dim + spec.obs_dim)


# ---------------------------------------------------------------------------
# Model posterior predictor
# ---------------------------------------------------------------------------


class ModelPosteriorNet:
    """Categorical posterior over candidate models given one stage's history."""

    def __init__(self, net: nn.DenseNet):
        self.net = net

    @classmethod
    def create(cls, cond_dim, n_models, rng, hidden=256):
        sizes = [cond_dim, hidden, hidden, hidden, n_models]
        acts = ("relu", "relu", "relu", "logsoftmax")
        return cls(nn.DenseNet.create(sizes, acts, rng))

    @property
    def n_models(self):
        return self.net.out_dim

    def log_probs(self, cond):
        out, _ = nn.forward(self.net, cond)
        return out

    def log_posterior(self, cond, m):
        out = self.log_probs(np.atleast_2d(cond))
        return out[np.arange(out.shape[0]), np.asarray(m, dtype=np.int64)]

    def objective_grads(self, cond, m, row_scale):
        """Value and parameter gradients of ``sum_i row_scale_i log q(m_i | cond_i)``."""
        cond = np.atleast_2d(cond)
        out, tape = nn.forward(self.net, cond)
        rows = np.arange(cond.shape[0])
        m = np.asarray(m, dtype=np.int64)
        d_out = np.zeros_like(out)
        d_out[rows, m] = row_scale
        grads, _ = nn.backward(self.net, tape, d_out)
        return out[rows, m], grads

    def params(self):
        return self.net.params()

    def named_nets(self):
        return [("net", self.net)]


# ---------------------------------------------------------------------------
# Gaussian mixture predictor
# ---------------------------------------------------------------------------


class GmmNet:
    """Conditional independent-Gaussian mixture with affine output ranges.

    A shared two-layer feature net feeds three heads: mixture weights
    (softmax), means, and standard deviations (sigmoid squashed, then mapped
    affinely into ``[mean_low, mean_high]`` / ``[std_low, std_high]`` per
    dimension).  Dimensions with finite support bounds use truncated normal
    components.
    """

    def __init__(self, feature, weight, mean, std, ranges, backend=None):
        self.feature = feature
        self.weight = weight
        self.mean = mean
        self.std = std
        self.n_mixture = weight.out_dim
        self.dim = mean.out_dim // self.n_mixture
        self.mean_low = np.broadcast_to(ranges.mean_low, (self.dim,)).astype(np.float64)
        self.mean_span = np.broadcast_to(ranges.mean_high - ranges.mean_low,
                                         (self.dim,)).astype(np.float64)
        self.std_low = np.broadcast_to(ranges.std_low, (self.dim,)).astype(np.float64)
        self.std_span = np.broadcast_to(ranges.std_high - ranges.std_low,
                                        (self.dim,)).astype(np.float64)
        if np.any(self.std_low <= 0) or np.any(self.mean_span <= 0) or np.any(self.std_span <= 0):
            raise ValueError("mixture output ranges must be non-degenerate with std_low > 0")
        self.lower = None if ranges.lower is None else np.asarray(ranges.lower, np.float64)
        self.upper = None if ranges.upper is None else np.asarray(ranges.upper, np.float64)
        self.backend = backend

    @classmethod
    def create(cls, dim, cond_dim, ranges, rng, n_mixture=8, hidden=256, backend=None):
        if cond_dim < 1:
            raise ValueError("mixture predictor requires a non-empty conditioning vector")
        feature = nn.DenseNet.create([cond_dim, hidden, hidden], ("relu", "relu"), rng)
        weight = nn.DenseNet.create([hidden, hidden, hidden, n_mixture],
                                    ("relu", "relu", "softmax"), rng)
        mean = nn.DenseNet.create([hidden, hidden, hidden, n_mixture * dim],
                                  ("relu", "relu", "sigmoid"), rng)
        std = nn.DenseNet.create([hidden, hidden, hidden, n_mixture * dim],
                                 ("relu", "relu", "sigmoid"), rng)
        return cls(feature, weight, mean, std, ranges, backend=backend)

    def _heads(self, cond, keep_tapes):
        cond = np.atleast_2d(cond)
        n = cond.shape[0]
        feat, tape_f = nn.forward(self.feature, cond)
        w, tape_w = nn.forward(self.weight, feat)
        s_mu, tape_mu = nn.forward(self.mean, feat)
        s_sig, tape_sig = nn.forward(self.std, feat)
        mu = self.mean_low + self.mean_span * s_mu.reshape(n, self.n_mixture, self.dim)
        sig = self.std_low + self.std_span * s_sig.reshape(n, self.n_mixture, self.dim)
        tapes = (tape_f, tape_w, tape_mu, tape_sig) if keep_tapes else None
        return w, mu, sig, tapes

    def mixture_params(self, cond):
        """Predicted (weights, means, stds) for each conditioning row."""
        w, mu, sig, _ = self._heads(cond, keep_tapes=False)
        return w, mu, sig

    def log_posterior(self, cond, x):
        w, mu, sig, _ = self._heads(cond, keep_tapes=False)
        return kernels.gmm_logpdf_batch(np.atleast_2d(x), w, mu, sig,
                                        self.lower, self.upper, backend=self.backend)

    def objective_grads(self, cond, x, row_scale):
        """Value and parameter gradients of ``sum_i row_scale_i log q(x_i | cond_i)``."""
        x = np.atleast_2d(x)
        n = x.shape[0]
        w, mu, sig, tapes = self._heads(cond, keep_tapes=True)
        tape_f, tape_w, tape_mu, tape_sig = tapes
        logq, d_w, d_mu, d_sig = kernels.gmm_logpdf_grads(
            x, w, mu, sig, self.lower, self.upper, backend=self.backend)
        scale = np.asarray(row_scale, dtype=np.float64)[:, None]
        g_w = d_w * scale
        g_mu = (d_mu * self.mean_span).reshape(n, -1) * scale
        g_sig = (d_sig * self.std_span).reshape(n, -1) * scale
        grads_w, d_f1 = nn.backward(self.weight, tape_w, g_w)
        grads_mu, d_f2 = nn.backward(self.mean, tape_mu, g_mu)
        grads_sig, d_f3 = nn.backward(self.std, tape_sig, g_sig)
        grads_f, _ = nn.backward(self.feature, tape_f, d_f1 + d_f2 + d_f3)
        return logq, grads_f + grads_w + grads_mu + grads_sig

    def sample(self, cond, rng):
        w, mu, sig, _ = self._heads(cond, keep_tapes=False)
        n = w.shape[0]
        cum = np.cumsum(w, axis=1)
        comp = (rng.random((n, 1)) < cum).argmax(axis=1)
        rows = np.arange(n)
        m_sel, s_sel = mu[rows, comp], sig[rows, comp]
        lo = np.full(self.dim, -np.inf) if self.lower is None else self.lower
        hi = np.full(self.dim, np.inf) if self.upper is None else self.upper
        out = np.empty((n, self.dim))
        for d in range(self.dim):
            if np.isfinite(lo[d]) or np.isfinite(hi[d]):
                out[:, d] = prob.truncnorm_sample(m_sel[:, d], s_sel[:, d],
                                                  lo[d], hi[d], rng)
            else:
                out[:, d] = m_sel[:, d] + s_sel[:, d] * rng.standard_normal(n)
        return out

    def params(self):
        return (self.feature.params() + self.weight.params()
                + self.mean.params() + self.std.params())

    def named_nets(self):
        return [("feature", self.feature), ("weight", self.weight),
                ("mean", self.mean), ("std", self.std)]


# ---------------------------------------------------------------------------
# Coupling-flow predictor
# ---------------------------------------------------------------------------


class _CouplingBlock:
    __slots__ = ("s1", "t1", "s2", "t2")

    def __init__(self, s1, t1, s2, t2):
        self.s1, self.t1, self.s2, self.t2 = s1, t1, s2, t2

    def nets(self):
        return [("s1", self.s1), ("t1", self.t1), ("s2", self.s2), ("t2", self.t2)]


class FlowNet:
    """Conditional invertible flow built from affine coupling blocks.

    The density direction maps a parameter vector to the standard-normal
    base:  within each block, with ``a = [feature(I_k), part]``,

        x2' = x2 * exp(s1(a1)) + t1(a1),   a1 = [F, x1]
        x1' = x1 * exp(s2(a2)) + t2(a2),   a2 = [F, x2']

    and the log|det| contribution is the sum of all s-net outputs.  With an
    empty conditioning vector (``cond_dim=0``) the feature net is dropped and
    the coupling nets see only the parameter part.  Sampling inverts the
    blocks in reverse order.  The evaluated density is floored at 1e-27.

    Scale outputs are clamped to ``|s| <= 60`` (with the gradient masked where
    the clamp binds) so that density queries far outside the fitted region
    saturate at the floor instead of overflowing ``exp``; the bound is far
    beyond any scale a trained block uses, so it is inert in normal operation.
    """

    S_BOUND = 60.0

    def __init__(self, feature, blocks, dim, cond_dim):
        if dim < 2:
            raise ValueError("coupling flows require parameter dimension >= 2")
        self.feature = feature            # None when cond_dim == 0
        self.blocks = blocks
        self.dim = dim
        self.cond_dim = cond_dim
        self.dim1 = dim // 2
        self.dim2 = dim - self.dim1

    @classmethod
    def create(cls, dim, cond_dim, rng, n_trans=4, hidden=256, feature_hidden=None):
        if dim < 2:
            raise ValueError("coupling flows require parameter dimension >= 2")
        dim1, dim2 = dim // 2, dim - dim // 2
        feature = None
        if cond_dim > 0:
            fh = (hidden, hidden, hidden) if feature_hidden is None else tuple(feature_hidden)
            feature = nn.DenseNet.create([cond_dim, *fh, cond_dim],
                                         ("relu",) * len(fh) + ("identity",), rng)
        blocks = []
        for _ in range(n_trans):
            def coupling_net(in_part, out_part):
                net = nn.DenseNet.create(
                    [cond_dim + in_part, hidden, hidden, hidden, out_part],
                    ("relu", "relu", "relu", "identity"), rng)
                # Identity-at-init: a zeroed final layer keeps every s, t output
                # at 0, so stacked exp(s) factors cannot overflow before the
                # first update and a fresh flow is exactly the base density.
                net.weights[-1][:] = 0.0
                return net
            blocks.append(_CouplingBlock(
                s1=coupling_net(dim1, dim2), t1=coupling_net(dim1, dim2),
                s2=coupling_net(dim2, dim1), t2=coupling_net(dim2, dim1)))
        return cls(feature, blocks, dim, cond_dim)

    def _features(self, cond, keep_tape):
        if self.cond_dim == 0:
            return None, None
        feat, tape = nn.forward(self.feature, np.atleast_2d(cond))
        return feat, (tape if keep_tape else None)

    @staticmethod
    def _with_feature(feat, part):
        return part if feat is None else np.concatenate([feat, part], axis=1)

    def _forward(self, cond, x, keep_tapes):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        feat, tape_f = self._features(cond, keep_tapes)
        z = x
        logdet = np.zeros(n)
        caches = []
        bound = self.S_BOUND
        for blk in self.blocks:
            z1, z2 = z[:, :self.dim1], z[:, self.dim1:]
            a1 = self._with_feature(feat, z1)
            s1_raw, tp_s1 = nn.forward(blk.s1, a1)
            t1, tp_t1 = nn.forward(blk.t1, a1)
            s1 = np.clip(s1_raw, -bound, bound)
            e1 = np.exp(s1)
            z2n = z2 * e1 + t1
            a2 = self._with_feature(feat, z2n)
            s2_raw, tp_s2 = nn.forward(blk.s2, a2)
            t2, tp_t2 = nn.forward(blk.t2, a2)
            s2 = np.clip(s2_raw, -bound, bound)
            e2 = np.exp(s2)
            z1n = z1 * e2 + t2
            logdet += s1.sum(axis=1) + s2.sum(axis=1)
            if keep_tapes:
                mask1 = (np.abs(s1_raw) < bound).astype(np.float64)
                mask2 = (np.abs(s2_raw) < bound).astype(np.float64)
                caches.append((z1, z2, e1, e2, mask1, mask2,
                               tp_s1, tp_t1, tp_s2, tp_t2))
            z = np.concatenate([z1n, z2n], axis=1)
        return z, logdet, caches, tape_f

    def transform(self, cond, x):
        """Density-direction map to the base space: returns (u, logdet)."""
        u, logdet, _, _ = self._forward(cond, x, keep_tapes=False)
        return u, logdet

    def inverse_transform(self, cond, u):
        """Base-to-parameter map (sampling direction): returns (x, logdet)."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        feat, _ = self._features(cond, keep_tape=False)
        z = u
        logdet = np.zeros(u.shape[0])
        bound = self.S_BOUND
        for blk in reversed(self.blocks):
            z1n, z2n = z[:, :self.dim1], z[:, self.dim1:]
            a2 = self._with_feature(feat, z2n)
            s2, _ = nn.forward(blk.s2, a2)
            t2, _ = nn.forward(blk.t2, a2)
            z1 = (z1n - t2) * np.exp(-np.clip(s2, -bound, bound))
            a1 = self._with_feature(feat, z1)
            s1, _ = nn.forward(blk.s1, a1)
            t1, _ = nn.forward(blk.t1, a1)
            z2 = (z2n - t1) * np.exp(-np.clip(s1, -bound, bound))
            logdet -= (np.clip(s1, -bound, bound).sum(axis=1)
                       + np.clip(s2, -bound, bound).sum(axis=1))
            z = np.concatenate([z1, z2], axis=1)
        return z, logdet

    def log_posterior(self, cond, x):
        u, logdet, _, _ = self._forward(cond, x, keep_tapes=False)
        base = -0.5 * (u * u).sum(axis=1) - 0.5 * self.dim * math.log(2.0 * math.pi)
        return np.logaddexp(base + logdet, LOG_FLOOR)

    def objective_grads(self, cond, x, row_scale):
        """Value and parameter gradients of ``sum_i row_scale_i log q(x_i | cond_i)``."""
        u, logdet, caches, tape_f = self._forward(cond, x, keep_tapes=True)
        base = -0.5 * (u * u).sum(axis=1) - 0.5 * self.dim * math.log(2.0 * math.pi)
        raw = base + logdet
        logq = np.logaddexp(raw, LOG_FLOOR)
        wgt = np.asarray(row_scale, dtype=np.float64) * np.exp(raw - logq)
        wcol = wgt[:, None]
        dz = wcol * (-u)
        d_feat = None
        grads = {}
        for blk, cache in zip(reversed(self.blocks), reversed(caches)):
            z1, z2, e1, e2, mask1, mask2, tp_s1, tp_t1, tp_s2, tp_t2 = cache
            dz1n, dz2n = dz[:, :self.dim1], dz[:, self.dim1:]
            # x1' = x1 * e2 + t2, plus the logdet term sum(s2)
            g_s2 = (dz1n * z1 * e2 + wcol) * mask2
            gr_s2, da2_s = nn.backward(blk.s2, tp_s2, g_s2)
            gr_t2, da2_t = nn.backward(blk.t2, tp_t2, dz1n)
            da2 = da2_s + da2_t
            dz1 = dz1n * e2
            if self.cond_dim > 0:
                d_feat = da2[:, :self.cond_dim] if d_feat is None \
                    else d_feat + da2[:, :self.cond_dim]
                dz2n_tot = dz2n + da2[:, self.cond_dim:]
            else:
                dz2n_tot = dz2n + da2
            # x2' = x2 * e1 + t1, plus the logdet term sum(s1)
            g_s1 = (dz2n_tot * z2 * e1 + wcol) * mask1
            gr_s1, da1_s = nn.backward(blk.s1, tp_s1, g_s1)
            gr_t1, da1_t = nn.backward(blk.t1, tp_t1, dz2n_tot)
            da1 = da1_s + da1_t
            dz2 = dz2n_tot * e1
            if self.cond_dim > 0:
                d_feat = d_feat + da1[:, :self.cond_dim]
                dz1 = dz1 + da1[:, self.cond_dim:]
            else:
                dz1 = dz1 + da1
            dz = np.concatenate([dz1, dz2], axis=1)
            grads[blk] = (gr_s1, gr_t1, gr_s2, gr_t2)
        flat = []
        if self.cond_dim > 0:
            grads_f, _ = nn.backward(self.feature, tape_f, d_feat)
            flat.extend(grads_f)
        for blk in self.blocks:
            gr_s1, gr_t1, gr_s2, gr_t2 = grads[blk]
            flat.extend(gr_s1 + gr_t1 + gr_s2 + gr_t2)
        return logq, flat

    def sample(self, cond, rng, n=None):
        if n is None:
            n = np.atleast_2d(cond).shape[0] if self.cond_dim > 0 else 1
        u = rng.standard_normal((n, self.dim))
        x, _ = self.inverse_transform(cond, u)
        return x

    def params(self):
        flat = [] if self.feature is None else self.feature.params()
        for blk in self.blocks:
            for _, net in blk.nets():
                flat.extend(net.params())
        return flat

    def named_nets(self):
        named = [] if self.feature is None else [("feature", self.feature)]
        for i, blk in enumerate(self.blocks):
            named.extend((f"block{i}.{name}", net) for name, net in blk.nets())
        return named


# ---------------------------------------------------------------------------
# Per-stage predictor bundle
# ---------------------------------------------------------------------------


class PredictorSet:
    """All posterior predictors a reward mode needs, plus their optimizers.

    ``mode="terminal"`` builds nets at the final stage only; ``"incremental"``
    at every stage ``1..N``.  Stage 0 never has a net: the prior plays the
    role of ``q(.|I_0)``.  Predictor log-probabilities therefore always exist
    for the model and parameter targets; for the predictive-quantity target
    the stage-0/prior density may be unavailable, in which case callers omit
    that term (a policy-independent shift).
    """

    TERMINAL = "terminal"
    INCREMENTAL = "incremental"

    def __init__(self, env, mode, use_model, use_param, use_qoi,
                 model_nets, param_nets, qoi_nets):
        self.env = env
        self.mode = mode
        self.use_model = use_model
        self.use_param = use_param
        self.use_qoi = use_qoi
        self.model_nets = model_nets      # {stage: ModelPosteriorNet}
        self.param_nets = param_nets      # {(stage, m): GmmNet | FlowNet}
        self.qoi_nets = qoi_nets          # {(stage, m): GmmNet | FlowNet}
        self.stages = self._stage_list(env.spec.horizon, mode)
        self._adam = {name: nn.AdamState.for_params(net.params())
                      for name, net in self.named_nets()}

    @staticmethod
    def _stage_list(horizon, mode):
        if mode == PredictorSet.TERMINAL:
            return [horizon]
        if mode == PredictorSet.INCREMENTAL:
            return list(range(1, horizon + 1))
        raise ValueError(f"unknown reward mode {mode!r}")

    @classmethod
    def create(cls, env, mode, rng, *, use_model=None, use_param=True, use_qoi=False,
               param_family="gmm", qoi_family="gmm", n_mixture=8, n_trans=4,
               hidden=256, flow_feature_hidden=None, backend=None):
        spec = env.spec
        if use_model is None:
            use_model = spec.n_models > 1
        if use_qoi and spec.qoi_dims is None:
            raise ValueError("environment exposes no predictive quantity of interest")
        stages = cls._stage_list(spec.horizon, mode)
        step = spec.design_dim + spec.obs_dim

        def make_density_net(dim, cond_dim, ranges, family):
            if family == "gmm":
                return GmmNet.create(dim, cond_dim, ranges, rng,
                                     n_mixture=n_mixture, hidden=hidden, backend=backend)
            if family == "flow":
                if ranges.lower is not None or ranges.upper is not None:
                    raise ValueError("flow predictors do not support truncated supports")
                return FlowNet.create(dim, cond_dim, rng, n_trans=n_trans, hidden=hidden,
                                      feature_hidden=flow_feature_hidden)
            raise ValueError(f"unknown posterior family {family!r}")

        model_nets, param_nets, qoi_nets = {}, {}, {}
        for k in stages:
            cond_dim = k * step
            if use_model:
                model_nets[k] = ModelPosteriorNet.create(cond_dim, spec.n_models,
                                                         rng, hidden=hidden)
            for m in range(spec.n_models):
                if use_param:
                    param_nets[(k, m)] = make_density_net(
                        spec.theta_dims[m], cond_dim, env.param_ranges(m), param_family)
                if use_qoi:
                    qoi_nets[(k, m)] = make_density_net(
                        spec.qoi_dims[m], cond_dim, env.qoi_ranges(m), qoi_family)
        return cls(env, mode, use_model, use_param, use_qoi,
                   model_nets, param_nets, qoi_nets)

    # -- encodings --------------------------------------------------------------

    def encode(self, designs, observations):
        """History encoding using all recorded stages of the given arrays."""
        return encode_history(designs, observations, self.env.obs_net_scale)

    # -- log-probability queries (stage 0 = prior) --------------------------------

    def log_model(self, stage, cond, m):
        if stage == 0:
            return self.env.log_prior_model(m)
        return self.model_nets[stage].log_posterior(cond, m)

    def _density_rows(self, nets, stage, cond, m, values, prior_fn, dims):
        n = np.asarray(m).shape[0]
        out = np.empty(n)
        for model in range(self.env.spec.n_models):
            rows = np.nonzero(np.asarray(m) == model)[0]
            if rows.size == 0:
                continue
            vals = values[rows, :dims[model]]
            if stage == 0:
                lp = prior_fn(model, vals)
                if lp is None:
                    return None
                out[rows] = lp
            else:
                out[rows] = nets[(stage, model)].log_posterior(cond[rows], vals)
        return out

    def log_param(self, stage, cond, m, theta):
        return self._density_rows(self.param_nets, stage, cond, m, theta,
                                  self.env.log_prior_theta, self.env.spec.theta_dims)

    def log_qoi(self, stage, cond, m, qoi):
        """May return None at stage 0 (no prior-predictive density)."""
        return self._density_rows(self.qoi_nets, stage, cond, m, qoi,
                                  self.env.log_prior_qoi, self.env.spec.qoi_dims)

    # -- one maximization step on all nets -----------------------------------------

    def adam_update(self, encodings, batch, lr):
        """One Adam ascent step on ``mean_i sum_targets log q(. | I_stage)``.

        ``encodings`` maps each stage in ``self.stages`` to that stage's
        conditioning array for ``batch``.  Returns the objective value
        (mean summed log-probability) before the step.
        """
        n = batch.m.shape[0]
        scale_all = np.full(n, 1.0 / n)
        total = 0.0
        spec = self.env.spec
        for stage in self.stages:
            cond = encodings[stage]
            if self.use_model:
                net = self.model_nets[stage]
                vals, grads = net.objective_grads(cond, batch.m, scale_all)
                total += vals.mean()
                self._ascend(f"model.k{stage}", net, grads, lr)
            for model in range(spec.n_models):
                rows = np.nonzero(batch.m == model)[0]
                if rows.size == 0:
                    continue
                scale = np.full(rows.size, 1.0 / n)
                if self.use_param:
                    net = self.param_nets[(stage, model)]
                    theta = batch.theta[rows, :spec.theta_dims[model]]
                    vals, grads = net.objective_grads(cond[rows], theta, scale)
                    total += vals.sum() / n
                    self._ascend(f"param.k{stage}.m{model}", net, grads, lr)
                if self.use_qoi:
                    net = self.qoi_nets[(stage, model)]
                    qoi = batch.qoi[rows, :spec.qoi_dims[model]]
                    vals, grads = net.objective_grads(cond[rows], qoi, scale)
                    total += vals.sum() / n
                    self._ascend(f"qoi.k{stage}.m{model}", net, grads, lr)
        return total

    def _ascend(self, name, net, grads, lr):
        nn.check_finite(grads, context=f"predictor {name}")
        nn.adam_step(net.params(), [-g for g in grads], self._adam[name], lr)

    # -- bookkeeping ------------------------------------------------------------

    def named_nets(self):
        named = []
        for stage, net in sorted(self.model_nets.items()):
            named.append((f"model.k{stage}", net))
        for (stage, m), net in sorted(self.param_nets.items()):
            named.append((f"param.k{stage}.m{m}", net))
        for (stage, m), net in sorted(self.qoi_nets.items()):
            named.append((f"qoi.k{stage}.m{m}", net))
        return named

    def named_dense_nets(self):
        """Flat (name, DenseNet) pairs for serialization."""
        out = []
        for name, net in self.named_nets():
            out.extend((f"{name}.{sub}", dense) for sub, dense in net.named_nets())
        return out

    def adam_states(self):
        return self._adam
