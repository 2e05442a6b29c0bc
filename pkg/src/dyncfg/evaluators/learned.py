"""Learned noisy-latent evaluators with an sklearn-style estimator surface.

Each scorer is a small time-conditioned MLP.  ``fit`` draws fresh timesteps
and Gaussian noise every step, so the scorer learns to read latents at every
noise level; ``evaluate(x, t, cond)`` returns a greater-is-better score.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .._validation import ContractError, as_conditions, as_latents, as_timesteps
from ..diffusion import NoiseSchedule
from .loss_weight import LossWeightSchedule, loss_weight
from .mlp import MLP, MomentumSGD, sinusoidal_embedding


class TrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


def log_softplus(r):
    """log(log(1 + e^r)), accurate for very negative r."""
    r = np.asarray(r, dtype=np.float64)
    sp = np.logaddexp(0.0, r)
    return np.where(r < -30.0, r, np.log(np.maximum(sp, 1e-300)))


def bt_probability(score_i, score_j):
    """Bradley-Terry probability that i beats j, after mapping scores through softplus."""
    li = log_softplus(score_i)
    lj = log_softplus(score_j)
    # sp_i / (sp_i + sp_j) written as a logistic of the log-ratio
    p = 1.0 / (1.0 + np.exp(lj - li))
    return float(p) if np.ndim(p) == 0 else p


class _LatentScorer(BaseEstimator):
    kind = "learned"
    requires_condition = False
    default_loss_weighting = "none"

    def __init__(
        self,
        hidden=(64, 64, 64),
        time_dim=16,
        embed_dim=16,
        n_steps=2000,
        batch_size=256,
        lr=0.05,
        momentum=0.9,
        temperature=1.0,
        loss_weighting=None,
        sharpness=5.0,
        schedule="cosine",
        T=200,
        seed=0,
    ):
        self.hidden = hidden
        self.time_dim = time_dim
        self.embed_dim = embed_dim
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.temperature = temperature
        self.loss_weighting = loss_weighting
        self.sharpness = sharpness
        self.schedule = schedule
        self.T = T
        self.seed = seed

    # -- shared plumbing ----------------------------------------------------

    def _setup(self, d: int, n_classes: int):
        self.sched_ = NoiseSchedule.from_name(self.schedule, self.T)
        self.n_features_in_ = d
        self.n_classes_ = n_classes
        self._rng = np.random.default_rng(self.seed)
        weighting = self.loss_weighting or self.default_loss_weighting
        if weighting == "none":
            self.loss_schedule_ = None
        else:
            self.loss_schedule_ = LossWeightSchedule(0, self.T, self.sharpness, weighting)

    def _noise(self, X0: np.ndarray, t: np.ndarray) -> np.ndarray:
        ab = self.sched_.alpha_bar[t][:, None]
        eps = self._rng.standard_normal(X0.shape)
        return np.sqrt(ab) * X0 + np.sqrt(1.0 - ab) * eps

    def _draw_t(self, n: int) -> np.ndarray:
        return self._rng.integers(0, self.T + 1, size=n)

    def _weights(self, t: np.ndarray) -> np.ndarray:
        if self.loss_schedule_ is None:
            return np.ones(t.shape[0])
        return loss_weight(self.loss_schedule_, t)

    def _features(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return np.concatenate([x, sinusoidal_embedding(t / self.T, self.time_dim)], axis=1)

    def _train(self):
        params = self._params()
        opt = MomentumSGD(params, self.lr, self.momentum)
        self.loss_history_ = []
        for step in range(self.n_steps):
            loss, grads = self._loss_and_grads()
            if not np.isfinite(loss):
                raise TrainingError(step, loss)
            opt.step(grads)
            self.loss_history_.append(loss)
        self.loss_history_ = np.asarray(self.loss_history_)
        del self._rng
        return self

    def _prepare(self, x, t, cond):
        check_is_fitted(self, "net_")
        x = as_latents(x, self.n_features_in_)
        t = as_timesteps(t, x.shape[0], self.T)
        conds = as_conditions(cond, x.shape[0], self.n_classes_, allow_null=not self.requires_condition)
        return x, t, conds

    @property
    def n_params(self) -> int:
        check_is_fitted(self, "net_")
        return sum(p.size for p in self._params())

    @property
    def multiply_adds(self) -> int:
        check_is_fitted(self, "net_")
        return self.net_.multiply_adds + self._head_multiply_adds()

    def _head_multiply_adds(self) -> int:
        return 0

    def state_arrays(self) -> dict:
        check_is_fitted(self, "net_")
        out = {}
        for i, (W, b) in enumerate(zip(self.net_.weights, self.net_.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        out.update(self._extra_state())
        return out

    def load_state(self, d: int, n_classes: int, arrays: dict):
        self.sched_ = NoiseSchedule.from_name(self.schedule, self.T)
        self.n_features_in_ = d
        self.n_classes_ = n_classes
        n_layers = sum(1 for k in arrays if k.startswith("W"))
        sizes = [arrays["W0"].shape[0]] + [arrays[f"W{i}"].shape[1] for i in range(n_layers)]
        net = MLP(sizes, np.random.default_rng(0))
        net.weights = [np.array(arrays[f"W{i}"]) for i in range(n_layers)]
        net.biases = [np.array(arrays[f"b{i}"]) for i in range(n_layers)]
        self.net_ = net
        self._load_extra(arrays)
        return self

    def _extra_state(self) -> dict:
        return {}

    def _load_extra(self, arrays: dict):
        pass


class _DualEncoder(_LatentScorer):
    """Latent encoder g(x_t, t) scored against a class-embedding table by inner product."""

    requires_condition = True

    def _init_dual(self, d: int, n_classes: int):
        sizes = [d + self.time_dim, *self.hidden, self.embed_dim]
        self.net_ = MLP(sizes, self._rng)
        # zero table: an untrained scorer cannot prefer any class
        self.class_emb_ = np.zeros((n_classes, self.embed_dim))

    def _params(self):
        return self.net_.params + [self.class_emb_]

    def _extra_state(self):
        return {"class_emb": self.class_emb_}

    def _load_extra(self, arrays):
        self.class_emb_ = np.array(arrays["class_emb"])

    def _head_multiply_adds(self) -> int:
        return self.embed_dim

    def embed(self, x, t):
        """Latent embedding g(x_t, t), shape (n, embed_dim)."""
        x, t, _ = self._prepare(x, t, 0)
        return self.net_.forward(self._features(x, t))

    def class_scores(self, x, t) -> np.ndarray:
        """(n, C) inner products against every class embedding."""
        return self.embed(x, t) @ self.class_emb_.T / self.temperature

    def evaluate(self, x, t, cond) -> np.ndarray:
        x, t, conds = self._prepare(x, t, cond)
        g = self.net_.forward(self._features(x, t))
        return np.einsum("nd,nd->n", g, self.class_emb_[conds]) / self.temperature


class AlignmentScorer(_DualEncoder):
    """Contrastive noisy-latent/class encoder.

    Each latent is contrasted against the whole class vocabulary: a softmax
    over inner products with every class embedding, trained with
    cross-entropy on the true class.
    """

    kind = "alignment-learned"

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if y.shape[0] != X.shape[0]:
            raise ContractError("X and y disagree on sample count")
        n_classes = int(y.max()) + 1
        self._setup(X.shape[1], n_classes)
        self._init_dual(X.shape[1], n_classes)
        self._X, self._y = X, y
        if self.n_steps > 0:
            self._train()
        else:
            self.loss_history_ = np.array([])
        del self._X, self._y
        return self

    def _loss_and_grads(self):
        idx = self._rng.integers(0, self._X.shape[0], size=self.batch_size)
        t = self._draw_t(self.batch_size)
        feats = self._features(self._noise(self._X[idx], t), t)
        labels = self._y[idx]
        g, cache = self.net_.forward(feats, keep=True)
        logits = g @ self.class_emb_.T / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w = self._weights(t)
        B = self.batch_size
        wsum = w.sum()
        loss = float(-np.sum(w * np.log(p[np.arange(B), labels] + 1e-300)) / wsum)
        d_logits = p
        d_logits[np.arange(B), labels] -= 1.0
        d_logits *= w[:, None] / (wsum * self.temperature)
        d_emb = d_logits.T @ g
        grads, _ = self.net_.backward(cache, d_logits @ self.class_emb_)
        return loss, grads + [d_emb]

    def predict(self, x, t):
        return np.argmax(self.class_scores(x, t), axis=1)


class RewardScorer(_DualEncoder):
    """Dual encoder tuned on preference pairs with the Bradley-Terry objective.

    ``warm_start_from`` may hold a fitted :class:`AlignmentScorer` whose
    weights seed the optimisation.
    """

    kind = "reward-learned"
    default_loss_weighting = "exponential"

    def __init__(
        self,
        hidden=(64, 64, 64),
        time_dim=16,
        embed_dim=16,
        n_steps=2000,
        batch_size=256,
        lr=0.05,
        momentum=0.9,
        temperature=1.0,
        loss_weighting=None,
        sharpness=5.0,
        schedule="cosine",
        T=200,
        seed=0,
        warm_start_from=None,
    ):
        super().__init__(
            hidden=hidden, time_dim=time_dim, embed_dim=embed_dim, n_steps=n_steps,
            batch_size=batch_size, lr=lr, momentum=momentum, temperature=temperature,
            loss_weighting=loss_weighting, sharpness=sharpness, schedule=schedule, T=T,
            seed=seed,
        )
        self.warm_start_from = warm_start_from

    def fit(self, X_preferred, X_rejected, cond, n_classes: int | None = None):
        Xi = check_array(X_preferred, dtype=np.float64)
        Xj = check_array(X_rejected, dtype=np.float64)
        if Xi.shape != Xj.shape:
            raise ContractError("preferred and rejected latents must have the same shape")
        if Xi.shape[0] < 1:
            raise ContractError("at least one preference pair is required")
        c = np.asarray(cond, dtype=np.int64).reshape(-1)
        if c.shape[0] != Xi.shape[0]:
            raise ContractError("one condition per pair is required")
        n_classes = n_classes or int(c.max()) + 1
        self._setup(Xi.shape[1], n_classes)
        self._init_dual(Xi.shape[1], n_classes)
        src = self.warm_start_from
        if src is not None:
            self.net_.weights = [W.copy() for W in src.net_.weights]
            self.net_.biases = [b.copy() for b in src.net_.biases]
            self.class_emb_ = src.class_emb_.copy()
        self._Xi, self._Xj, self._c = Xi, Xj, c
        if self.n_steps > 0:
            self._train()
        else:
            self.loss_history_ = np.array([])
        del self._Xi, self._Xj, self._c
        return self

    def _loss_and_grads(self):
        B = self.batch_size
        idx = self._rng.integers(0, self._Xi.shape[0], size=B)
        t = self._draw_t(B)
        c = self._c[idx]
        feats = np.concatenate([
            self._features(self._noise(self._Xi[idx], t), t),
            self._features(self._noise(self._Xj[idx], t), t),
        ])
        g, cache = self.net_.forward(feats, keep=True)
        emb = self.class_emb_[c]
        emb2 = np.concatenate([emb, emb])
        r = np.einsum("nd,nd->n", g, emb2) / self.temperature
        ri, rj = r[:B], r[B:]
        lsi, lsj = log_softplus(ri), log_softplus(rj)
        log_den = np.logaddexp(lsi, lsj)
        w = self._weights(t)
        w = w / w.sum()
        loss = float(-np.sum(w * (lsi - log_den)))
        # d log sp(r) / dr = sigmoid(r) / sp(r)
        sig_i = 1.0 / (1.0 + np.exp(-ri))
        sig_j = 1.0 / (1.0 + np.exp(-rj))
        ratio_i = sig_i * np.exp(-lsi)
        ratio_j = sig_j * np.exp(-lsj)
        p_i = np.exp(lsi - log_den)
        p_j = np.exp(lsj - log_den)
        dri = -w * ratio_i * (1.0 - p_i)
        drj = w * ratio_j * p_j
        dr = np.concatenate([dri, drj]) / self.temperature
        d_g = dr[:, None] * emb2
        d_emb_rows = dr[:, None] * g
        d_emb = np.zeros_like(self.class_emb_)
        np.add.at(d_emb, np.concatenate([c, c]), d_emb_rows)
        grads, _ = self.net_.backward(cache, d_g)
        return loss, grads + [d_emb]


class DiscriminatorScorer(_LatentScorer):
    """Real-vs-generated classifier on noisy latents; scores are log-odds of real."""

    kind = "discriminator-learned"

    def fit(self, X_real, X_generated):
        Xr = check_array(X_real, dtype=np.float64)
        Xg = check_array(X_generated, dtype=np.float64)
        if Xr.shape[1] != Xg.shape[1]:
            raise ContractError("real and generated sets differ in dimension")
        self._setup(Xr.shape[1], 1)
        sizes = [Xr.shape[1] + self.time_dim, *self.hidden, 1]
        self.net_ = MLP(sizes, self._rng, zero_last=True)
        self._Xr, self._Xg = Xr, Xg
        if self.n_steps > 0:
            self._train()
        else:
            self.loss_history_ = np.array([])
        del self._Xr, self._Xg
        return self

    def _params(self):
        return self.net_.params

    def _loss_and_grads(self):
        half = self.batch_size // 2
        ir = self._rng.integers(0, self._Xr.shape[0], size=half)
        ig = self._rng.integers(0, self._Xg.shape[0], size=half)
        X0 = np.concatenate([self._Xr[ir], self._Xg[ig]])
        label = np.concatenate([np.ones(half), np.zeros(half)])
        t = self._draw_t(2 * half)
        logit, cache = self.net_.forward(self._features(self._noise(X0, t), t), keep=True)
        logit = logit[:, 0]
        w = self._weights(t)
        w = w / w.sum()
        loss = float(np.sum(w * (np.logaddexp(0.0, logit) - label * logit)))
        p = 1.0 / (1.0 + np.exp(-logit))
        grads, _ = self.net_.backward(cache, ((p - label) * w)[:, None])
        return loss, grads

    def evaluate(self, x, t, cond=None) -> np.ndarray:
        x, t, _ = self._prepare(x, t, None)
        return self.net_.forward(self._features(x, t))[:, 0]

    def predict_proba(self, x, t) -> np.ndarray:
        """Probability that each latent is real."""
        return 1.0 / (1.0 + np.exp(-self.evaluate(x, t)))


class CapabilityRegressor(_LatentScorer):
    """MSE regression from (x_t, t, class) to a programmatic score of the clean sample."""

    kind = "capability-learned"
    requires_condition = True
    default_loss_weighting = "exponential"

    def fit(self, X, cond, scores):
        X = check_array(X, dtype=np.float64)
        c = np.asarray(cond, dtype=np.int64).reshape(-1)
        y = np.asarray(scores, dtype=np.float64).reshape(-1)
        if not X.shape[0] == c.shape[0] == y.shape[0]:
            raise ContractError("X, cond and scores disagree on sample count")
        n_classes = int(c.max()) + 1
        self._setup(X.shape[1], n_classes)
        sizes = [X.shape[1] + self.time_dim + self.embed_dim, *self.hidden, 1]
        self.net_ = MLP(sizes, self._rng, zero_last=True)
        self.class_emb_ = self._rng.standard_normal((n_classes, self.embed_dim))
        self.target_mean_ = float(y.mean())
        std = float(y.std())
        self.target_scale_ = std if std > 1e-12 else 1.0
        self._X, self._c, self._y = X, c, (y - self.target_mean_) / self.target_scale_
        if self.n_steps > 0:
            self._train()
        else:
            self.loss_history_ = np.array([])
        del self._X, self._c, self._y
        return self

    def _params(self):
        return self.net_.params + [self.class_emb_]

    def _extra_state(self):
        return {
            "class_emb": self.class_emb_,
            "target": np.array([self.target_mean_, self.target_scale_]),
        }

    def _load_extra(self, arrays):
        self.class_emb_ = np.array(arrays["class_emb"])
        self.target_mean_, self.target_scale_ = (float(v) for v in arrays["target"])

    def _inputs(self, x, t, c):
        return np.concatenate([self._features(x, t), self.class_emb_[c]], axis=1)

    def _loss_and_grads(self):
        B = self.batch_size
        idx = self._rng.integers(0, self._X.shape[0], size=B)
        t = self._draw_t(B)
        c = self._c[idx]
        pred, cache = self.net_.forward(self._inputs(self._noise(self._X[idx], t), t, c), keep=True)
        err = pred[:, 0] - self._y[idx]
        w = self._weights(t)
        w = w / w.sum()
        loss = float(np.sum(w * err * err))
        grads, d_in = self.net_.backward(cache, (2.0 * w * err)[:, None])
        d_emb = np.zeros_like(self.class_emb_)
        np.add.at(d_emb, c, d_in[:, -self.embed_dim:])
        return loss, grads + [d_emb]

    def evaluate(self, x, t, cond) -> np.ndarray:
        x, t, c = self._prepare(x, t, cond)
        out = self.net_.forward(self._inputs(x, t, c))[:, 0]
        return self.target_mean_ + self.target_scale_ * out

    predict = evaluate


def nearest_mean_oracle(world, x0, cond) -> np.ndarray:
    """Default capability target: minus the squared distance to the class's nearest component mean."""
    x0 = as_latents(x0, world.d)
    conds = as_conditions(cond, x0.shape[0], world.n_classes, allow_null=False)
    out = np.empty(x0.shape[0])
    for c in np.unique(conds):
        sel = conds == c
        mu = world.classes[c].means
        d2 = np.sum((x0[sel, None, :] - mu[None]) ** 2, axis=-1)
        out[sel] = -d2.min(axis=1)
    return out
