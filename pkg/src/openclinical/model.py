"""The assembled diagnosis model: backbone + OpenMax calibration + recommender."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import backbone, openmax, recommender
from .domain import N_ACTIONS, ExamKind, FeatureRow, Observation, StrategySet, VisitRecord, dense_input, to_engine_order
from .io import load_params, save_params

BACKBONE_FILE = "backbone.bin"
OPENMAX_FILE = "openmax.json"
RECOMMENDER_FILE = "recommender.bin"


@dataclass
class OpenClinicalModel:
    width: int
    backbone_cfg: backbone.BackboneConfig
    backbone_params: dict
    calibration: openmax.OpenMaxCalibration | None = None
    recommender_cfg: recommender.RecommenderConfig | None = None
    recommender_params: dict | None = None

    def outputs(self, X) -> backbone.BackboneOutput:
        return backbone.forward(self.backbone_params, self.backbone_cfg, np.atleast_2d(X))

    def open_probs(self, X) -> np.ndarray:
        """Engine-order (AD, CN, Unknown) probabilities for dense inputs."""
        if self.calibration is None:
            raise RuntimeError("model has no OpenMax calibration yet")
        out = self.outputs(X)
        return to_engine_order(openmax.openmax_predict_batch(self.calibration, out.activation, out.embedding))

    def predict_strategies(self, visit: VisitRecord, ds: StrategySet) -> np.ndarray:
        X = np.vstack([dense_input(visit.subset(s), self.width) for s in ds])
        return self.open_probs(X)

    def recommend(self, rows: Mapping[ExamKind, FeatureRow], pred) -> np.ndarray:
        if self.recommender_params is None:
            return np.zeros(N_ACTIONS)
        obs = Observation(rows, pred)
        return recommender.recommend(self.recommender_params, self.recommender_cfg, obs)

    def predict(self, rows: Mapping[ExamKind, FeatureRow]) -> tuple[np.ndarray, np.ndarray]:
        p = self.open_probs(dense_input(rows, self.width)[None, :])[0]
        return p, self.recommend(rows, p)

    # ------------------------------------------------------------------
    def save(self, model_dir) -> None:
        os.makedirs(model_dir, exist_ok=True)
        save_params(
            os.path.join(model_dir, BACKBONE_FILE),
            self.backbone_params,
            kind="backbone",
            width=self.width,
            config=self.backbone_cfg.to_dict(),
            seed=self.backbone_cfg.seed,
        )
        if self.calibration is not None:
            with open(os.path.join(model_dir, OPENMAX_FILE), "w", encoding="utf-8") as fh:
                json.dump(self.calibration.to_dict(), fh, sort_keys=True, indent=1)
                fh.write("\n")
        if self.recommender_params is not None:
            save_params(
                os.path.join(model_dir, RECOMMENDER_FILE),
                self.recommender_params,
                kind="recommender",
                width=self.width,
                config=self.recommender_cfg.to_dict(),
                seed=self.recommender_cfg.seed,
            )

    @classmethod
    def load(cls, model_dir) -> "OpenClinicalModel":
        bp, head = load_params(os.path.join(model_dir, BACKBONE_FILE))
        m = cls(int(head["width"]), backbone.BackboneConfig(**head["config"]), bp)
        path = os.path.join(model_dir, OPENMAX_FILE)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                m.calibration = openmax.OpenMaxCalibration.from_dict(json.load(fh))
        path = os.path.join(model_dir, RECOMMENDER_FILE)
        if os.path.exists(path):
            rp, rhead = load_params(path)
            m.recommender_cfg = recommender.RecommenderConfig(**rhead["config"])
            m.recommender_params = rp
        return m
