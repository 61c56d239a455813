"""PCA compression of trajectories and a random-forest map from parameters to coefficients."""
from .cv import DEFAULT_GRID, CvReport, cv_search, expand_grid, fold_indices, load_grid
from .forest import Hyperparams, RandomForest, fit_forest
from .model import (REL_ERROR_FLOOR, Surrogate, SurrogatePrediction, load_surrogate,
                    median_abs_rel_error, save_surrogate, surrogate_predict, train_surrogate)
from .pca import PcaBasis, pca_fit, pca_project, pca_reconstruct
from .tree import Tree, fit_tree

__all__ = [
    "DEFAULT_GRID", "CvReport", "cv_search", "expand_grid", "fold_indices", "load_grid",
    "Hyperparams", "RandomForest", "fit_forest",
    "REL_ERROR_FLOOR", "Surrogate", "SurrogatePrediction", "load_surrogate",
    "median_abs_rel_error", "save_surrogate", "surrogate_predict", "train_surrogate",
    "PcaBasis", "pca_fit", "pca_project", "pca_reconstruct", "Tree", "fit_tree",
]
