"""Estimator-style front end so the detector composes with the usual
fit/predict tooling (parameter search, cloning, pipelines).

MicroTargetDetector follows the scikit-learn contract without importing
it: constructor arguments are stored verbatim, ``get_params``/``set_params``
round-trip them, and all learned state lives in underscore-suffixed
attributes created by ``fit``.
"""

from __future__ import annotations

import inspect
from dataclasses import replace

import numpy as np

from microdet.config import load_config
from microdet.data import Sample
from microdet.train import Trainer, predict_images
from microdet.validation import check_image_batch, check_labels


class NotFittedError(RuntimeError):
    """predict/score called before fit."""


class MicroTargetDetector:
    """Small-object detector with a fit/predict interface.

    Parameters mirror the run-configuration knobs that matter most at
    this surface; everything else keeps its config default.

    fit(X, y): X is [N, 3, S, S] float imagery in [0, 1] (S = input_size),
    y gives per-image targets as (M, 5) arrays of [class, cx, cy, w, h]
    rows (normalized) or (BBox, class) pairs.

    predict(X) returns one (M, 6) float array per image with rows
    [class, score, cx, cy, w, h], sorted by descending score.
    """

    def __init__(self, input_size=64, levels=("P2", "P3", "P4"),
                 use_attention=True, use_dfl=False, o2o_head=True,
                 width_multiple=0.25, depth_multiple=0.34, num_classes=1,
                 epochs=10, batch_size=8, seed=0, eta_muon=0.02, eta_sgd=0.1,
                 momentum=0.9, decode="o2o", conf_thresh=0.25, iou_thresh=0.5):
        self.input_size = input_size
        self.levels = levels
        self.use_attention = use_attention
        self.use_dfl = use_dfl
        self.o2o_head = o2o_head
        self.width_multiple = width_multiple
        self.depth_multiple = depth_multiple
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.eta_muon = eta_muon
        self.eta_sgd = eta_sgd
        self.momentum = momentum
        self.decode = decode
        self.conf_thresh = conf_thresh
        self.iou_thresh = iou_thresh

    # -- scikit-learn parameter contract ------------------------------------

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "MicroTargetDetector":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for MicroTargetDetector; "
                    f"valid parameters are {sorted(valid)}")
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"MicroTargetDetector({args})"

    # -- configuration -------------------------------------------------------

    def _run_config(self):
        cfg = load_config(None)
        cfg.model = replace(cfg.model, input_size=self.input_size,
                            levels=tuple(self.levels),
                            use_attention=self.use_attention,
                            use_dfl=self.use_dfl, o2o_head=self.o2o_head,
                            width_multiple=self.width_multiple,
                            depth_multiple=self.depth_multiple,
                            num_classes=self.num_classes)
        cfg.optimizer = replace(cfg.optimizer, eta_muon=self.eta_muon,
                                eta_sgd=self.eta_sgd, momentum=self.momentum)
        cfg.train = replace(cfg.train, epochs=self.epochs,
                            batch_size=self.batch_size, seed=self.seed,
                            decode=self.decode, conf_thresh=self.conf_thresh,
                            iou_thresh=self.iou_thresh)
        return cfg

    # -- estimator API ---------------------------------------------------------

    def fit(self, X, y) -> "MicroTargetDetector":
        images = check_image_batch(X, self.input_size)
        labels = check_labels(y, len(images), self.num_classes)
        cfg = self._run_config()
        samples = [Sample(image_u8=np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8),
                          gts=gts, name=str(i))
                   for i, (img, gts) in enumerate(zip(images, labels))]
        trainer = Trainer(cfg, samples)
        outcome = trainer.run(out_dir=None)
        self.model_ = trainer.model
        self.history_ = outcome.history
        self.config_ = cfg
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this MicroTargetDetector instance is not fitted yet; call fit first")

    def predict(self, X) -> list[np.ndarray]:
        self._require_fitted()
        images = check_image_batch(X, self.input_size)
        dets_per_image = predict_images(
            self.model_, images, self.decode, self.conf_thresh,
            self.iou_thresh, self.batch_size)
        out = []
        for dets in dets_per_image:
            rows = np.array([[d.class_id, d.score, d.bbox.cx, d.bbox.cy,
                              d.bbox.w, d.bbox.h] for d in dets],
                            dtype=np.float32).reshape(-1, 6)
            out.append(rows)
        return out

    def score(self, X, y) -> float:
        """Mean average precision at IoU 0.5 on the given batch."""
        self._require_fitted()
        from microdet.evalbench import evaluate
        images = check_image_batch(X, self.input_size)
        labels = check_labels(y, len(images), self.num_classes)
        dets = predict_images(self.model_, images, self.decode,
                              self.conf_thresh, self.iou_thresh, self.batch_size)
        return evaluate(dets, labels, image_size=self.input_size).map50

    def save(self, path) -> None:
        self._require_fitted()
        from microdet.config import write_model_sidecar
        self.model_.save(path)
        write_model_sidecar(self.model_.cfg, str(path) + ".cfg")

    @classmethod
    def from_checkpoint(cls, path, **params) -> "MicroTargetDetector":
        from microdet.train import load_model
        model = load_model(path)
        est = cls(input_size=model.cfg.input_size, levels=model.cfg.levels,
                  use_attention=model.cfg.use_attention, use_dfl=model.cfg.use_dfl,
                  o2o_head=model.cfg.o2o_head,
                  width_multiple=model.cfg.width_multiple,
                  depth_multiple=model.cfg.depth_multiple,
                  num_classes=model.cfg.num_classes)
        est.set_params(**params)
        est.model_ = model
        est.history_ = []
        est.config_ = est._run_config()
        return est
