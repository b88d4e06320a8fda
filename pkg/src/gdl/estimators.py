"""scikit-learn style wrappers around the noise model and guidance networks."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import tensor as tn
from .experts import ExpertBank
from .networks import MLP, EpsilonModel, MlpSpec
from .samplers import GuidanceSpec, SamplerConfig, sample
from .schedule import make_linear_schedule
from .training import TrainConfig, train_epsilon, train_experts_data_free, train_experts_supervised, train_teacher


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class DiffusionModel(BaseEstimator):
    """Noise-prediction model on ``(n_samples, n_features)`` data.

    ``fit`` trains the noise predictor; ``sample`` draws new points, with
    optional guidance from a fitted :class:`ExpertGuidance`.
    """

    def __init__(self, T=1000, beta_start=1e-4, beta_end=0.02, hidden_dims=(128, 128, 128), time_embed_dim=32,
                 iterations=20000, batch_size=256, learning_rate=2e-3, lr_schedule="cosine", random_state=0):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.hidden_dims = hidden_dims
        self.time_embed_dim = time_embed_dim
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.schedule_ = make_linear_schedule(self.T, self.beta_start, self.beta_end)
        self.model_ = EpsilonModel.create(X.shape[1], tuple(self.hidden_dims), self.time_embed_dim,
                                          seed=self.random_state)
        cfg = TrainConfig(iterations=self.iterations, batch_size=self.batch_size, learning_rate=self.learning_rate,
                          weight_decay=0.0, seed=self.random_state, lr_schedule=self.lr_schedule)
        self.loss_curve_ = train_epsilon(self.schedule_, self.model_, X, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_eps(self, X, t):
        check_is_fitted(self, "model_")
        return self.model_.predict_eps(check_array(X, dtype=np.float64), t)

    def sample(self, n_samples, kind="ddim", steps=25, eta=0.0, seed=0, guidance=None, target=None,
               scale=7.5):
        """Draw ``n_samples`` points; ``guidance`` is a fitted :class:`ExpertGuidance`."""
        check_is_fitted(self, "model_")
        bank, spec = None, None
        if guidance is not None:
            check_is_fitted(guidance, "bank_")
            bank = guidance.bank_
            mode = "multi_expert" if guidance.n_experts > 1 else "single_noise_aware"
            spec = GuidanceSpec(mode, "class_nll", guidance.class_index(target), scale)
        return sample(self.schedule_, self.model_, bank, spec, SamplerConfig(kind, steps, eta, seed),
                      int(n_samples), self.n_features_in_).x0


class GuidanceClassifier(ClassifierMixin, BaseEstimator):
    """Off-the-shelf classifier trained on clean data (the guidance teacher)."""

    def __init__(self, hidden_dims=(64, 64), nonlinearity="relu", iterations=6000, batch_size=128,
                 learning_rate=2e-3, lr_schedule="cosine", random_state=0):
        self.hidden_dims = hidden_dims
        self.nonlinearity = nonlinearity
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        spec = MlpSpec(X.shape[1], tuple(self.hidden_dims), len(self.classes_), self.nonlinearity)
        self.net_ = MLP(spec, np.random.default_rng(self.random_state))
        cfg = TrainConfig(iterations=self.iterations, batch_size=self.batch_size, learning_rate=self.learning_rate,
                          weight_decay=0.0, seed=self.random_state, lr_schedule=self.lr_schedule)
        self.loss_curve_ = train_teacher(self.net_, X, codes, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        with tn.no_grad():
            return self.net_(X).data

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class ExpertGuidance(ClassifierMixin, BaseEstimator):
    """Timestep-routed experts fine-tuned from a fitted :class:`GuidanceClassifier`.

    With ``data_free=True`` (the default) ``fit(X)`` distils the teacher on
    unlabeled ``X``; otherwise ``fit(X, y)`` fine-tunes on labelled data.
    ``rank=None`` gives full fine-tuning. ``iterations`` is the total budget
    shared by all experts. Prediction methods take the timestep ``t``.
    """

    def __init__(self, teacher=None, diffusion=None, n_experts=5, rank=4, alpha=8.0, data_free=True,
                 iterations=5000, batch_size=128, learning_rate=1e-3, weight_decay=0.05, temperature=1.0,
                 random_state=0):
        self.teacher = teacher
        self.diffusion = diffusion
        self.n_experts = n_experts
        self.rank = rank
        self.alpha = alpha
        self.data_free = data_free
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.temperature = temperature
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.teacher is None or self.diffusion is None:
            raise ValueError("ExpertGuidance needs a fitted teacher and diffusion model")
        check_is_fitted(self.teacher, "net_")
        check_is_fitted(self.diffusion, "model_")
        sched = self.diffusion.schedule_
        cfg = TrainConfig(iterations=self.iterations, batch_size=self.batch_size, learning_rate=self.learning_rate,
                          weight_decay=self.weight_decay, seed=self.random_state, temperature=self.temperature,
                          expert_count=self.n_experts)
        self.bank_ = ExpertBank(self.teacher.net_.clone(), self.n_experts, sched.T, rank=self.rank,
                                alpha=self.alpha, seed=self.random_state)
        self.classes_ = self.teacher.classes_
        if self.data_free:
            X = check_array(X, dtype=np.float64)
            self.loss_curves_ = train_experts_data_free(sched, self.bank_, X, cfg)
        else:
            if y is None:
                raise ValueError("supervised fine-tuning needs labels y")
            X, y = check_X_y(X, y, dtype=np.float64)
            self.loss_curves_ = train_experts_supervised(sched, self.bank_, X, self.class_index(y), cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def class_index(self, labels):
        """Map labels to output indices."""
        labels = np.asarray(labels)
        idx = np.searchsorted(self.classes_, labels)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == labels):
            raise ValueError("unknown class label")
        return idx if idx.ndim else int(idx)

    def decision_function(self, X, t: Optional[int] = 0):
        check_is_fitted(self, "bank_")
        X = check_array(X, dtype=np.float64)
        n = self.bank_.expert_for(t) if t else None
        with tn.no_grad():
            return self.bank_.forward(X, n).data

    def predict_proba(self, X, t: Optional[int] = 0):
        return _softmax(self.decision_function(X, t))

    def predict(self, X, t: Optional[int] = 0):
        scores = self.decision_function(X, t)
        return self.classes_[np.argmax(scores, axis=1)]
