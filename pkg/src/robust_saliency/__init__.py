"""Certifiably robust saliency maps via Gaussian smoothing and sparsification."""

from .attack import AttackConfig, AttackResult, SmoothedProvider, l2_topk_attack, objective_D, objective_gradient
from .certificates import (
    CertificateReport,
    RankCertificate,
    certified_ranks,
    general_rank_bound,
    median_rank_bound,
    pairwise_certified,
    rank_certificate,
    topk_certificate,
    topk_overlap,
)
from .data import Dataset, load_digits_split, load_idx, synth_blobs
from .nn import TinyModel, init_model, load_model, save_model, train
from .numerics import CertificateParams, empirical_floor_fn, floor_fn, hoeffding_margin
from .saliency import GradientSaliency, SparsifyParams, rank_of, relaxed_sparsify, sparsify
from .smoothing import SmoothedSaliency, SmoothingConfig, smooth

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "SmoothedProvider", "l2_topk_attack", "objective_D", "objective_gradient",
    "CertificateReport", "RankCertificate", "certified_ranks", "general_rank_bound", "median_rank_bound",
    "pairwise_certified", "rank_certificate", "topk_certificate", "topk_overlap",
    "Dataset", "load_digits_split", "load_idx", "synth_blobs",
    "TinyModel", "init_model", "load_model", "save_model", "train",
    "CertificateParams", "empirical_floor_fn", "floor_fn", "hoeffding_margin",
    "GradientSaliency", "SparsifyParams", "rank_of", "relaxed_sparsify", "sparsify",
    "SmoothedSaliency", "SmoothingConfig", "smooth",
]
