"""Deformable point-set registration: coherent point drift with learned
graph-network descriptors, triplet pretraining and end-to-end fine-tuning."""

from .cpd import CPDParams, register, register_unrolled
from .evaluation import TREStats, rank_sum_test, target_registration_error
from .graphnet import NetworkParams, TrainConfig, descriptor_forward, init_params
from .pointcloud import LandmarkPairs, farthest_point_sample, knn_indices, load_pointset
from .synth import RegistrationCase, make_case
from .tps import tps_eval, tps_fit

__all__ = [
    "CPDParams", "register", "register_unrolled",
    "TREStats", "rank_sum_test", "target_registration_error",
    "NetworkParams", "TrainConfig", "descriptor_forward", "init_params",
    "LandmarkPairs", "farthest_point_sample", "knn_indices", "load_pointset",
    "RegistrationCase", "make_case", "tps_eval", "tps_fit",
]
__version__ = "0.1.0"
