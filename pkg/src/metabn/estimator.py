"""scikit-learn style wrapper around joint training, meta-training and adaptation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Domain
from .evaluation import AdaptConfig, adapt_domain, eval_modes, predict
from .layers import ArchConfig, Mode, Model, backbone_forward, predict_logits, set_mode
from .ssl import SSLTaskConfig
from .tensor import Tensor, no_grad
from .training import JointConfig, MetaConfig, meta_train, train_joint


class MetaBNClassifier(ClassifierMixin, BaseEstimator):
    """Classifier whose BN affines are meta-trained for few-shot test-time adaptation.

    ``fit`` takes the source samples with a per-sample domain id.  At predict
    time the affines are adapted on an unlabeled support drawn from the batch
    being predicted, which is assumed to come from a single domain.

    Inputs are ``(n, C, H, W)`` images (convolutional backbone) or
    ``(n, d)`` vectors (dense backbone).
    """

    def __init__(
        self,
        widths=(16, 32, 64),
        ssl_hidden: int = 64,
        joint_epochs: int = 20,
        joint_eta: float = 1e-3,
        batch_size: int = 64,
        lam: float = 0.1,
        meta_epochs: int = 10,
        alpha: float = 3e-4,
        delta: float = 3e-5,
        meta_batch: int = 4,
        support_size: int = 12,
        query_size: int = 48,
        adapt: bool = True,
        random_state: int = 0,
    ):
        self.widths = widths
        self.ssl_hidden = ssl_hidden
        self.joint_epochs = joint_epochs
        self.joint_eta = joint_eta
        self.batch_size = batch_size
        self.lam = lam
        self.meta_epochs = meta_epochs
        self.alpha = alpha
        self.delta = delta
        self.meta_batch = meta_batch
        self.support_size = support_size
        self.query_size = query_size
        self.adapt = adapt
        self.random_state = random_state

    def _arch(self, X: np.ndarray) -> ArchConfig:
        common = dict(widths=tuple(self.widths), num_classes=len(self.classes_), ssl_hidden=self.ssl_hidden)
        if X.ndim == 2:
            return ArchConfig(kind="mlp", input_dim=X.shape[1], **common)
        if X.ndim == 4 and X.shape[2] == X.shape[3]:
            return ArchConfig(kind="conv", in_channels=X.shape[1], image_size=X.shape[2], **common)
        raise ValueError(f"expected (n, d) vectors or square (n, C, H, W) images, got shape {X.shape}")

    def _check_X(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.shape[1:] != self.input_shape_:
            raise ValueError(f"X has sample shape {X.shape[1:]}, the model was fit on {self.input_shape_}")
        return X

    def fit(self, X, y, domains=None):
        """Joint training on all sources, then meta-training across domains.

        With ``domains=None`` every sample is treated as one domain and the
        meta-training phase is skipped.
        """
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.input_shape_ = X.shape[1:]
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        domains = np.zeros(len(y), dtype=int) if domains is None else np.asarray(domains)
        if domains.shape != y.shape:
            raise ValueError("domains must hold one id per sample")
        ids = np.unique(domains)
        sources = []
        for i, did in enumerate(ids):
            mask = domains == did
            sources.append(Domain(i, {}, X[mask], y_enc[mask], int(mask.sum())))
        ssl_cfg = SSLTaskConfig()
        model = Model(self._arch(X), seed=self.random_state)
        jc = JointConfig(eta=self.joint_eta, lam=self.lam, epochs=self.joint_epochs, batch_size=self.batch_size)
        train_joint(model, (X, y_enc), jc, ssl_cfg, seed=self.random_state)
        set_mode(model, Mode.FROZEN)
        model.freeze_theta = True
        if len(sources) >= 2 and self.meta_epochs > 0:
            mc = MetaConfig(
                alpha=self.alpha,
                delta=self.delta,
                meta_batch=self.meta_batch,
                lam=self.lam,
                support_size=self.support_size,
                query_size=self.query_size,
            )
            meta_train(model, sources, mc, self.meta_epochs, ssl_cfg, seed=self.random_state)
        self.model_ = model
        self.ssl_cfg_ = ssl_cfg
        return self

    def adapted_model(self, X_support) -> Model:
        """Model adapted on an unlabeled support batch from one domain."""
        check_is_fitted(self, "model_")
        support = self._check_X(X_support)
        return adapt_domain(self.model_, support, AdaptConfig(alpha=self.alpha), self.ssl_cfg_, self.random_state)

    def _model_for(self, X: np.ndarray) -> Model:
        if not self.adapt:
            return self.model_
        rng = np.random.default_rng(self.random_state)
        k = min(self.support_size, X.shape[0])
        return self.adapted_model(X[np.sort(rng.choice(X.shape[0], size=k, replace=False))])

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        return self.classes_[predict(self._model_for(X), X)]

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        model = self._model_for(X)
        with eval_modes(model):
            logits = predict_logits(model, X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def transform(self, X):
        """Backbone features of the meta model with frozen statistics."""
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        with eval_modes(self.model_), no_grad():
            return backbone_forward(self.model_, Tensor(X)).data
