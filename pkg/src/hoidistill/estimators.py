"""scikit-learn style wrappers: a crop classifier teacher and the HOI student.

Both follow the estimator contract (hyper-parameters in ``__init__``,
learned state in trailing-underscore attributes, ``fit`` returns self), so
``get_params`` / ``set_params`` / ``clone`` work as usual.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Split
from .distill import (
    SupervisionCache,
    TrainConfig,
    precompute_supervision,
    predict_student,
    predict_training_free,
    prepare_features,
    train,
)
from .encoder import (
    TEACHER_RESOLUTION,
    AttentionPool,
    TeacherModel,
    Trunk,
    build_prompts,
    embed_prompts,
)
from .tensorcore import AdamW, Tensor, getitem, log_softmax, mean, neg
from .validation import check_crops, check_labels, check_split


class CropTeacher(ClassifierMixin, BaseEstimator):
    """Classifies square crops into HOI classes by prompt-embedding similarity.

    The trunk is random and frozen; only the attention pool is learned, with
    cross-entropy against the fixed prompt embedding.

    Parameters
    ----------
    labels : list of (verb, object)
        HOI label space, in class-index order.
    """

    def __init__(self, labels=None, dim=32, heads=4, resolution=TEACHER_RESOLUTION, temperature=0.07,
                 normalize=True, epochs=60, batch_size=64, lr=3e-3, weight_decay=0.01, seed=0,
                 trunk_seed=0, text_seed=0, upsample=False):
        self.labels = labels
        self.dim = dim
        self.heads = heads
        self.resolution = resolution
        self.temperature = temperature
        self.normalize = normalize
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.trunk_seed = trunk_seed
        self.text_seed = text_seed
        self.upsample = upsample

    def _build(self):
        labels = check_labels(self.labels)
        trunk = Trunk(self.dim, seed=self.trunk_seed, upsample=self.upsample).freeze()
        emb = embed_prompts(build_prompts(labels), self.dim, seed=self.text_seed, labels=labels)
        pool = AttentionPool(self.dim, self.heads, seed=self.seed, name="teacher_pool")
        return TeacherModel(trunk, pool, emb, self.resolution, self.temperature, self.normalize)

    def fit(self, X, y):
        """X: (n, R, R, 3) crops; y: 0-based class indices."""
        X = check_crops(X, self.resolution)
        y = np.asarray(y, dtype=int)
        if y.shape != (len(X),):
            raise ValueError("y must hold one label per crop")
        teacher = self._build()
        if y.min() < 0 or y.max() >= teacher.embedding.n:
            raise ValueError("label index out of range")
        patches = teacher.patches(X)
        params = teacher.pool.parameters()
        opt = AdamW(params, lr=self.lr, weight_decay=self.weight_decay)
        rng = np.random.default_rng([self.seed, 5])
        self.loss_curve_ = []
        for _epoch in range(self.epochs):
            order = rng.permutation(len(X))
            for k in range(0, len(X), self.batch_size):
                idx = order[k : k + self.batch_size]
                logp = log_softmax(teacher.logits_from_patches(patches[idx]), axis=-1)
                picked = getitem(logp, (np.arange(len(idx)), y[idx]))
                loss = neg(mean(picked))
                loss.backward()
                opt.step()
                self.loss_curve_.append(float(loss.data))
        teacher.pool.freeze()
        self.teacher_ = teacher
        self.classes_ = np.arange(teacher.embedding.n)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "teacher_")
        return self.teacher_.score(check_crops(X, self.resolution))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


class HOIStudent(BaseEstimator):
    """Multi-branch zero-shot HOI detector distilled from a frozen teacher.

    ``fit`` consumes a :class:`~hoidistill.data.Split` (images + proposals);
    ground-truth labels are never needed. ``predict`` returns a list of
    :class:`~hoidistill.evaluator.Detection`.
    """

    def __init__(self, teacher=None, variant="full", routing_union="u", routing_ho="g", lr=1e-4,
                 batch_size=16, total_iters=2000, decay_iter=1000, gamma=2.8, heads=4, seed=0,
                 nprime=None, subset_seed=0, weight_decay=0.01, temperature=0.07, normalize=True,
                 max_pairs=64, kl_teacher_first=False, student_min_edge=128):
        self.teacher = teacher
        self.variant = variant
        self.routing_union = routing_union
        self.routing_ho = routing_ho
        self.lr = lr
        self.batch_size = batch_size
        self.total_iters = total_iters
        self.decay_iter = decay_iter
        self.gamma = gamma
        self.heads = heads
        self.seed = seed
        self.nprime = nprime
        self.subset_seed = subset_seed
        self.weight_decay = weight_decay
        self.temperature = temperature
        self.normalize = normalize
        self.max_pairs = max_pairs
        self.kl_teacher_first = kl_teacher_first
        self.student_min_edge = student_min_edge

    def _teacher(self):
        t = self.teacher
        if isinstance(t, CropTeacher):
            check_is_fitted(t, "teacher_")
            return t.teacher_
        if not isinstance(t, TeacherModel):
            raise TypeError("teacher must be a fitted CropTeacher or a TeacherModel")
        return t

    def to_config(self):
        teacher = self._teacher()
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, total_iters=self.total_iters, decay_iter=self.decay_iter,
            gamma=self.gamma, dim=teacher.embedding.matrix.shape[1], heads=self.heads, seed=self.seed,
            variant=self.variant, routing_union=self.routing_union, routing_ho=self.routing_ho,
            nprime=self.nprime, subset_seed=self.subset_seed, weight_decay=self.weight_decay,
            temperature=self.temperature, normalize=self.normalize, max_pairs=self.max_pairs,
            kl_teacher_first=self.kl_teacher_first, student_min_edge=self.student_min_edge,
        ).validate()

    def fit(self, X: Split, y=None, supervision: SupervisionCache | None = None):
        X = check_split(X)
        teacher = self._teacher()
        config = self.to_config()
        self.config_ = config
        if not config.trainable:
            self.net_ = None
            self.loss_curve_ = []
            return self
        if supervision is None:
            supervision = precompute_supervision(X, teacher, config.max_pairs)
        result = train(X, supervision, teacher, config)
        self.net_ = result.net
        self.loss_curve_ = result.curve
        self.classes_ = result.classes
        return self

    def predict(self, X: Split):
        check_is_fitted(self, "config_")
        X = check_split(X)
        teacher = self._teacher()
        if self.net_ is None:
            return predict_training_free(X, teacher, self.config_)
        return predict_student(self.net_, X, teacher, self.config_)
