"""scikit-learn style wrappers around the trainers and pruners.

Each estimator builds its network in ``fit`` and exposes ``predict``,
``predict_proba`` and ``score``.  Pruners accept ``init=`` in ``fit`` to
start from an already fitted :class:`DenseClassifier` instead of
pretraining from scratch::

    dense = DenseClassifier(epochs=20, random_state=0).fit(X, y)
    pruned = SmartPruner(r=0.5, block_shape=(4, 4)).fit(X, y, init=dense)
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autodiff import log_softmax
from .baselines import AwgConfig, run_awg, run_magnitude
from .blocks import BlockSpec, expand_mask
from .data import Dataset, batches
from .models import ModelSpec, build_model
from .smart import SmartConfig, TempSchedule, run_smart
from .training import TrainConfig, train_step


class _NetworkEstimator(ClassifierMixin, BaseEstimator):
    """Shared input handling and inference for all estimators here."""

    def _train_config(self, epochs=0) -> TrainConfig:
        return TrainConfig(self.lr, self.momentum, self.weight_decay, self.batch_size,
                           self.random_state, epochs)

    def _input_shape(self, X):
        if self.input_shape is not None:
            return tuple(self.input_shape)
        if X.ndim > 2:
            return tuple(X.shape[1:])
        if self.architecture == "mlp":
            return (X.shape[1],)
        side = math.isqrt(X.shape[1])
        if side * side != X.shape[1]:
            raise ValueError(
                f"cannot infer an image shape from {X.shape[1]} features; set input_shape"
            )
        return (1, side, side)

    def _validate_fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need samples of at least 2 classes")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = self._input_shape(X)
        X = X.reshape((X.shape[0], *self.input_shape_))
        return Dataset(X, y_idx.astype(np.int64))

    def _build(self):
        spec = ModelSpec(self.architecture, self.input_shape_, tuple(self.channels), self.hidden,
                         self.classes_.size)
        return build_model(spec, self.random_state)

    def _multipliers(self):
        return None

    def _validate_predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ValueError(
                f"X has {int(np.prod(X.shape[1:]))} features, expected {self.n_features_in_}"
            )
        return X.reshape((X.shape[0], *self.input_shape_))

    def decision_function(self, X):
        X = self._validate_predict(X)
        mult = self._multipliers()
        return np.concatenate([self.model_.logits(X[i:i + 512], mult)
                               for i in range(0, len(X), 512)])

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class DenseClassifier(_NetworkEstimator):
    """Unpruned network trained with SGD and momentum."""

    def __init__(self, architecture="tiny_cnn", channels=(8, 16, 16), hidden=96,
                 input_shape=None, epochs=20, lr=0.02, momentum=0.9, weight_decay=5e-4,
                 batch_size=32, random_state=0):
        self.architecture = architecture
        self.channels = channels
        self.hidden = hidden
        self.input_shape = input_shape
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        data = self._validate_fit(X, y)
        tc = self._train_config(self.epochs)
        model = self._build()
        opt = tc.optimizer()
        self.loss_curve_ = []
        for epoch in range(tc.epochs):
            losses = [train_step(model, opt, xb, yb)
                      for xb, yb in batches(data, tc.batch_size, tc.seed, epoch)]
            self.loss_curve_.append(float(np.mean(losses)))
        self.model_ = model
        return self


class _PrunerEstimator(_NetworkEstimator):
    def _start(self, X, y, init):
        data = self._validate_fit(X, y)
        if init is None:
            return data, self._build(), False
        check_is_fitted(init, "model_")
        if not np.array_equal(init.classes_, self.classes_):
            raise ValueError("init estimator was fitted on different classes")
        if tuple(init.input_shape_) != self.input_shape_:
            raise ValueError("init estimator was fitted on a different input shape")
        return data, init.model_.copy(), True

    def _pretrain(self, model, data, epochs):
        tc = self._train_config(epochs)
        opt = tc.optimizer()
        for epoch in range(epochs):
            for xb, yb in batches(data, tc.batch_size, tc.seed, epoch):
                train_step(model, opt, xb, yb)

    def _multipliers(self):
        return expand_mask(self.partition_, self.mask_)

    @property
    def block_sparsity_(self) -> float:
        check_is_fitted(self, "mask_")
        return float(1.0 - self.mask_.mean())


class SmartPruner(_PrunerEstimator):
    """Block pruning with a learned soft top-k mask and an annealed temperature.

    Without ``init`` the network is pretrained for ``pretrain_epochs`` inside
    the SMART flow; with ``init`` search starts immediately.
    """

    def __init__(self, r=0.5, block_shape=(16, 8), pretrain_epochs=20, search_epochs=10,
                 finetune_epochs=5, schedule="exponential", tau_start=1.0, tau_end=1e-5,
                 mask_init="mean_abs", weights_frozen=False, mask_lr=None,
                 mask_weight_decay=0.0, architecture="tiny_cnn", channels=(8, 16, 16),
                 hidden=96, input_shape=None, lr=0.02, momentum=0.9, weight_decay=5e-4,
                 batch_size=32, random_state=0):
        self.r = r
        self.block_shape = block_shape
        self.pretrain_epochs = pretrain_epochs
        self.search_epochs = search_epochs
        self.finetune_epochs = finetune_epochs
        self.schedule = schedule
        self.tau_start = tau_start
        self.tau_end = tau_end
        self.mask_init = mask_init
        self.weights_frozen = weights_frozen
        self.mask_lr = mask_lr
        self.mask_weight_decay = mask_weight_decay
        self.architecture = architecture
        self.channels = channels
        self.hidden = hidden
        self.input_shape = input_shape
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y, init=None):
        data, model, warm = self._start(X, y, init)
        s = 0 if warm else self.pretrain_epochs
        cfg = SmartConfig(
            r=self.r,
            pretrain_epochs=s,
            search_end_epoch=s + self.search_epochs,
            finetune_epochs=self.finetune_epochs,
            schedule=TempSchedule(self.schedule, self.tau_start, self.tau_end),
            mask_init=self.mask_init,
            weights_frozen=self.weights_frozen,
            block=BlockSpec(*self.block_shape),
            train=self._train_config(),
            mask_lr=self.mask_lr,
            mask_weight_decay=self.mask_weight_decay,
        )
        run = run_smart(model, data, data, cfg)
        self.model_, self.partition_, self.mask_ = run.model, run.partition, run.hard_mask
        self.history_, self.diagnostics_ = run.history, run.diagnostics
        return self


class AwgPruner(_PrunerEstimator):
    """Iterative pruning on an EMA of block-summed |gradient x weight|."""

    def __init__(self, r=0.5, block_shape=(16, 8), steps=4, gamma=0.9,
                 finetune_epochs_per_step=2, final_finetune_epochs=5, mspl=1.0,
                 pretrain_epochs=20, architecture="tiny_cnn", channels=(8, 16, 16), hidden=96,
                 input_shape=None, lr=0.02, momentum=0.9, weight_decay=5e-4, batch_size=32,
                 random_state=0):
        self.r = r
        self.block_shape = block_shape
        self.steps = steps
        self.gamma = gamma
        self.finetune_epochs_per_step = finetune_epochs_per_step
        self.final_finetune_epochs = final_finetune_epochs
        self.mspl = mspl
        self.pretrain_epochs = pretrain_epochs
        self.architecture = architecture
        self.channels = channels
        self.hidden = hidden
        self.input_shape = input_shape
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y, init=None):
        data, model, warm = self._start(X, y, init)
        if not warm:
            self._pretrain(model, data, self.pretrain_epochs)
        cfg = AwgConfig(self.r, self.steps, self.gamma, self.finetune_epochs_per_step,
                        self.final_finetune_epochs, self.mspl, BlockSpec(*self.block_shape),
                        self._train_config())
        res = run_awg(model, data, data, cfg)
        self.model_, self.partition_, self.mask_ = res.model, res.partition, res.hard_mask
        self.history_, self.diagnostics_ = res.history, res.diagnostics
        return self


class MagnitudePruner(_PrunerEstimator):
    """One-shot pruning of the blocks with the smallest l1 norm, then fine-tuning."""

    def __init__(self, r=0.5, block_shape=(16, 8), finetune_epochs=15, pretrain_epochs=20,
                 architecture="tiny_cnn", channels=(8, 16, 16), hidden=96, input_shape=None,
                 lr=0.02, momentum=0.9, weight_decay=5e-4, batch_size=32, random_state=0):
        self.r = r
        self.block_shape = block_shape
        self.finetune_epochs = finetune_epochs
        self.pretrain_epochs = pretrain_epochs
        self.architecture = architecture
        self.channels = channels
        self.hidden = hidden
        self.input_shape = input_shape
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y, init=None):
        data, model, warm = self._start(X, y, init)
        if not warm:
            self._pretrain(model, data, self.pretrain_epochs)
        res = run_magnitude(model, data, data, self.r, self.finetune_epochs,
                            self._train_config(), BlockSpec(*self.block_shape))
        self.model_, self.partition_, self.mask_ = res.model, res.partition, res.hard_mask
        self.history_ = res.history
        return self
