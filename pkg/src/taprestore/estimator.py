"""scikit-learn style wrapper around the two-stage pipeline."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .backbone.model import ModelConfig, RestorationModel
from .degradation import PairedDataset
from .metrics import psnr
from .objectives import FeatureExtractor, LossWeights
from .prompting import RelatednessGraph, default_graph
from .training import DEFAULT_KEY_BIAS, TrainConfig, joint_train, predict, pretrain, prompt_tune, resolve_prompt, restore


class TAPRestorer(BaseEstimator, RegressorMixin):
    """Fit on (lq, hq, task) triples; predict restored images.

    ``X`` and ``y`` are (n, H, W, 3) arrays in [0, 1]; ``tasks`` gives each
    sample's degradation name. ``strategy="none"`` stops after pretraining.
    """

    def __init__(self, strategy: str = "p_attn_enhanced", length: int = 12, rank: Optional[int] = None,
                 pretrain_epochs: int = 30, tune_epochs: int = 15, batch_size: int = 8, crop_size: int = 64,
                 pretrain_lr: float = 1e-3, tune_lr: float = 3e-3, lambda_per: float = 0.1,
                 lambda_cont: float = 0.1, tau: float = 0.5, graph: Optional[dict] = None,
                 model_config: Optional[dict] = None, key_bias: float = DEFAULT_KEY_BIAS, seed: int = 0):
        self.strategy = strategy
        self.length = length
        self.rank = rank
        self.pretrain_epochs = pretrain_epochs
        self.tune_epochs = tune_epochs
        self.batch_size = batch_size
        self.crop_size = crop_size
        self.pretrain_lr = pretrain_lr
        self.tune_lr = tune_lr
        self.lambda_per = lambda_per
        self.lambda_cont = lambda_cont
        self.tau = tau
        self.graph = graph
        self.model_config = model_config
        self.key_bias = key_bias
        self.seed = seed

    def _check_images(self, X, name: str) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False, input_name=name)
        if X.ndim != 4 or X.shape[-1] != 3:
            raise ValueError(f"{name} must be (n, H, W, 3), got {X.shape}")
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError(f"{name} values must lie in [0, 1]")
        return X

    def _check_tasks(self, tasks, n: int) -> list:
        if tasks is None:
            raise ValueError("tasks is required: one degradation name per sample")
        tasks = [str(t) for t in tasks]
        if len(tasks) != n:
            raise ValueError(f"got {len(tasks)} task labels for {n} samples")
        return tasks

    def fit(self, X, y, tasks: Sequence[str] = None):
        X = self._check_images(X, "X")
        y = self._check_images(y, "y")
        check_consistent_length(X, y)
        if X.shape != y.shape:
            raise ValueError(f"X {X.shape} and y {y.shape} differ in shape")
        tasks = self._check_tasks(tasks, len(X))
        names = list(dict.fromkeys(tasks))
        data = PairedDataset(X, y, tasks, names, list(range(len(X))))
        setup = resolve_prompt(self.strategy, self.length, self.rank, key_bias=self.key_bias)
        mc = ModelConfig(**(self.model_config or {}))
        weights = LossWeights(lambda_per=self.lambda_per, lambda_cont=self.lambda_cont if setup.contrastive else 0.0,
                              tau=self.tau)
        graph = (RelatednessGraph.from_adjacency(names, self.graph) if self.graph is not None
                 else _fallback_graph(names))
        extractor = FeatureExtractor()
        crop = min(self.crop_size, X.shape[1], X.shape[2])

        def tc(stage, epochs, lr):
            return TrainConfig(stage=stage, epochs=epochs, batch_size=self.batch_size, lr_init=lr, crop_size=crop,
                               seed=self.seed, tasks=names)

        if setup.joint:
            res = joint_train(tc("joint", self.pretrain_epochs, self.pretrain_lr), RestorationModel(mc), data,
                              weights, extractor, setup, graph)
        else:
            res = pretrain(tc("pretrain", self.pretrain_epochs, self.pretrain_lr), RestorationModel(mc), data,
                           LossWeights(lambda_per=self.lambda_per, lambda_cont=0.0, tau=self.tau), extractor)
            if setup.strategy != "none":
                res = prompt_tune(tc("tune", self.tune_epochs, self.tune_lr), res.checkpoint, data, graph, weights,
                                  setup)
        self.checkpoint_ = res.checkpoint
        self.model_, self.bank_ = restore(res.checkpoint)
        self.tasks_ = names
        self.loss_curve_ = res.epoch_means
        return self

    def predict(self, X, tasks: Sequence[str] = None) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._check_images(X, "X")
        tasks = self._check_tasks(tasks, len(X))
        unknown = sorted(set(tasks) - set(self.tasks_))
        if unknown:
            raise ValueError(f"unknown task(s) {unknown}; fitted on {self.tasks_}")
        return predict(self.model_, X, tasks, self.bank_)

    def score(self, X, y, tasks: Sequence[str] = None, sample_weight=None) -> float:
        """Mean PSNR in dB (higher is better)."""
        pred = self.predict(X, tasks)
        y = self._check_images(y, "y")
        return float(np.average([psnr(p, t) for p, t in zip(pred, y)], weights=sample_weight))


def _fallback_graph(names: list) -> RelatednessGraph:
    try:
        return default_graph(names)
    except ValueError:
        # every task positive with every other one
        return RelatednessGraph.from_pairs(names, [(a, b) for i, a in enumerate(names) for b in names[i + 1:]])


__all__ = ["TAPRestorer"]
