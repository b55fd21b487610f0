"""Query path shared by the command line and the HTTP service.

A ``Recommender`` holds the feature extractors, the feature matrix and its
ball tree, checks at construction that all three belong together, and maps
an input image to a ranked list of catalog items.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import decode_image, resize, to_channels
from .feature_store import FeatureMatrix, concat_features, load_matrix
from .network.checkpoint import fingerprint, load_checkpoint
from .network.model import NetworkModel
from .ranking import BallTree, RankingResult, build, load_tree, recommend


class FingerprintError(RuntimeError):
    """Extractors, feature matrix and index do not belong together."""


class Recommender:
    def __init__(self, models: Sequence[NetworkModel], matrix: FeatureMatrix, tree: BallTree | None = None):
        if not models:
            raise FingerprintError("need at least one extractor")
        prints = tuple(fingerprint(m) for m in models)
        if prints != tuple(matrix.fingerprints):
            raise FingerprintError("index built with different extractors")
        if tuple(m.feature_dim for m in models) != tuple(matrix.dims):
            raise FingerprintError("index built with different extractors")
        if tree is None:
            tree = build(matrix)
        if tree.fmx_checksum != matrix.checksum() or tree.n != len(matrix):
            raise FingerprintError("index (.btx) was built from a different feature matrix")
        self.models = tuple(models)
        self.matrix = matrix
        self.tree = tree

    @classmethod
    def load(cls, checkpoints: Sequence[str | Path], fmx: str | Path, btx: str | Path | None = None) -> "Recommender":
        matrix = load_matrix(fmx)
        tree = load_tree(btx, matrix) if btx is not None else None
        return cls([load_checkpoint(p) for p in checkpoints], matrix, tree)

    @property
    def feature_dim(self) -> int:
        return self.matrix.width

    def features(self, image: np.ndarray) -> np.ndarray:
        parts = []
        for model in self.models:
            h, w, c = model.input_shape
            img = image if image.shape[:2] == (h, w) else resize(image, h, w)
            parts.append(model.extract_features(to_channels(img, c)[None])[0])
        return concat_features(parts)

    def recommend_image(self, image: np.ndarray, k: int, exclude_self: bool = False,
                        query_id: str | None = None) -> RankingResult:
        return recommend(self.tree, self.matrix, self.features(image), k, exclude_self, query_id)

    def recommend_bytes(self, data: bytes, k: int, exclude_self: bool = False) -> RankingResult:
        return self.recommend_image(decode_image(data), k, exclude_self)
