"""Scikit-learn style wrappers around the attribution pipeline.

All estimators take lists of :class:`~camta.data.Journey` as ``X``; labels
live on the journeys, so ``y`` is accepted and ignored for API
compatibility.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from camta import baselines
from camta.data import MAX_LEN, Journey, VocabMap, build_vocab, check_journey, encode
from camta.metrics import auc
from camta.model import AttributionResult, Hyperparams, attribute, load_checkpoint, save_checkpoint
from camta.segment import GROUP_NAMES, cluster_users
from camta.train import TrainConfig, train


def check_journeys(X, n_channels: int | None = None, max_len: int = MAX_LEN, encoded: bool = False) -> list[Journey]:
    """Validate a journey collection and return it as a list."""
    if isinstance(X, Journey):
        raise TypeError("expected a sequence of journeys, got a single Journey")
    X = list(X)
    if not X:
        raise ValueError("no journeys given")
    for j in X:
        if not isinstance(j, Journey):
            raise TypeError(f"expected Journey, got {type(j).__name__}")
        check_journey(j, n_channels, max_len)
        if encoded and any(not isinstance(c, (int, np.integer)) for tp in j.touchpoints for c in tp.covariates):
            raise ValueError(f"journey {j.journey_id} has unencoded covariates; run JourneyEncoder first")
    return X


class JourneyEncoder(TransformerMixin, BaseEstimator):
    """Frequency-ranked vocabulary per covariate field; rare values map to 0."""

    def __init__(self, top_v: int = 100, channels: Sequence[str] = ()):
        self.top_v = top_v
        self.channels = channels

    def fit(self, X, y=None):
        X = check_journeys(X)
        self.vocab_ = build_vocab(X, self.top_v, self.channels)
        return self

    def transform(self, X):
        check_is_fitted(self, "vocab_")
        return encode(check_journeys(X), self.vocab_)

    @classmethod
    def from_vocab(cls, vocab: VocabMap, top_v: int = 100) -> "JourneyEncoder":
        enc = cls(top_v=top_v, channels=tuple(vocab.channels))
        enc.vocab_ = vocab
        return enc


class CamtaAttributor(BaseEstimator):
    """Recurrent attention attribution model with a channel-adversarial representation.

    ``fit`` trains on encoded journeys (optionally with a separate
    validation list); ``predict_proba`` returns conversion probabilities and
    ``attribute`` the per-touchpoint credits.
    """

    def __init__(
        self,
        embedding_size=64,
        hidden_size=64,
        representation_size=32,
        head_size=64,
        dropout=0.1,
        lam=5.0,
        beta=5.0,
        max_len=MAX_LEN,
        attention_input="concat",
        linear_phi=False,
        learning_rate=1e-3,
        batch_size=256,
        epochs=50,
        clip_norm=5.0,
        selection="prediction",
        n_channels=None,
        cardinalities=None,
        random_state=0,
    ):
        self.embedding_size = embedding_size
        self.hidden_size = hidden_size
        self.representation_size = representation_size
        self.head_size = head_size
        self.dropout = dropout
        self.lam = lam
        self.beta = beta
        self.max_len = max_len
        self.attention_input = attention_input
        self.linear_phi = linear_phi
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip_norm = clip_norm
        self.selection = selection
        self.n_channels = n_channels
        self.cardinalities = cardinalities
        self.random_state = random_state

    def _hyperparams(self, X) -> Hyperparams:
        K = self.n_channels
        if K is None:
            K = max(max(j.channels) for j in X) + 1
        cards = self.cardinalities
        if cards is None:
            F = len(X[0].touchpoints[0].covariates)
            cards = [1 + max(int(tp.covariates[f]) for j in X for tp in j.touchpoints) for f in range(F)]
        return Hyperparams(
            n_channels=int(K),
            cardinalities=tuple(cards),
            embedding_size=self.embedding_size,
            hidden_size=self.hidden_size,
            representation_size=self.representation_size,
            head_size=self.head_size,
            dropout=self.dropout,
            lam=self.lam,
            beta=self.beta,
            max_len=self.max_len,
            attention_input=self.attention_input,
            linear_phi=self.linear_phi,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            clip_norm=self.clip_norm,
            selection=self.selection,
            seed=self.random_state,
        )

    def fit(self, X, y=None, validation=None):
        X = check_journeys(X, self.n_channels, self.max_len, encoded=True)
        val = check_journeys(validation, self.n_channels, self.max_len, encoded=True) if validation else X
        self.hyperparams_ = self._hyperparams(X + (val if validation else []))
        self.params_, self.history_ = train(X, val, self.hyperparams_, self._train_config())
        self.n_channels_ = self.hyperparams_.n_channels
        return self

    def attribute(self, X) -> list[AttributionResult]:
        check_is_fitted(self, "params_")
        X = check_journeys(X, self.n_channels_, self.hyperparams_.max_len, encoded=True)
        return attribute(self.params_, X, self.hyperparams_)

    def predict_proba(self, X) -> np.ndarray:
        p = np.array([r.conversion for r in self.attribute(X)])
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def score(self, X, y=None) -> float:
        """Conversion AUC."""
        X = list(X)
        return auc(self.predict_proba(X)[:, 1], [j.y for j in X])

    def save(self, path, vocab_hash: str = "") -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.hyperparams_, vocab_hash)

    @classmethod
    def load(cls, path) -> "CamtaAttributor":
        params, hp, _ = load_checkpoint(path)
        est = cls(
            embedding_size=hp.embedding_size,
            hidden_size=hp.hidden_size,
            representation_size=hp.representation_size,
            head_size=hp.head_size,
            dropout=hp.dropout,
            lam=hp.lam,
            beta=hp.beta,
            max_len=hp.max_len,
            attention_input=hp.attention_input,
            linear_phi=hp.linear_phi,
            n_channels=hp.n_channels,
            cardinalities=list(hp.cardinalities),
        )
        est.params_, est.hyperparams_, est.n_channels_ = params, hp, hp.n_channels
        return est


class RuleAttributor(BaseEstimator):
    """First-, last- or linear-touch credit. Stateless; ``fit`` only validates."""

    def __init__(self, kind: str = "linear"):
        self.kind = kind

    def fit(self, X=None, y=None):
        if self.kind not in baselines.RULES:
            raise ValueError(f"unknown rule {self.kind!r}; expected one of {baselines.RULES}")
        self.fitted_ = True
        return self

    def attribute(self, X) -> list[np.ndarray]:
        return [baselines.rule_attribution(j, self.kind) for j in check_journeys(X)]


class LogisticAttributor(BaseEstimator):
    """Logistic regression on channel counts; positive coefficients become channel credit."""

    def __init__(self, l2: float = 1e-4, n_channels=None):
        self.l2 = l2
        self.n_channels = n_channels

    def fit(self, X, y=None):
        X = check_journeys(X, self.n_channels)
        K = self.n_channels or max(max(j.channels) for j in X) + 1
        fit = baselines.lr_train(X, K, self.l2)
        self.n_channels_ = K
        self.coef_ = fit.coef
        self.intercept_ = fit.intercept
        self.n_iter_ = fit.n_iter
        self.credits_ = baselines.lr_attribute(fit.coef)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        z = baselines.channel_counts(check_journeys(X, self.n_channels_), self.n_channels_) @ self.coef_ + self.intercept_
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.column_stack([1.0 - p, p])

    def attribute(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "credits_")
        return [baselines.channel_credit_to_touchpoints(j, self.credits_) for j in check_journeys(X, self.n_channels_)]


class ReturnSegmenter(BaseEstimator):
    """1-D k-means over user returns with groups named by ascending centroid."""

    def __init__(self, n_clusters: int = 3, n_init: int = 100, random_state: int = 0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        labels, centroids = cluster_users(np.ravel(X), self.n_clusters, self.random_state, self.n_init)
        self.labels_ = labels
        self.cluster_centers_ = centroids
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "cluster_centers_")
        x = np.ravel(np.asarray(X, dtype=np.float64))
        return np.argmin(np.abs(x[:, None] - self.cluster_centers_[None, :]), axis=1)

    def group_names(self, labels=None) -> list[str]:
        labels = self.labels_ if labels is None else labels
        names = GROUP_NAMES if self.n_clusters == 3 else tuple(str(i) for i in range(self.n_clusters))
        return [names[i] for i in labels]
