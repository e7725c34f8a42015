"""Cluster enhancement: TFCE, exact TFCE, pTFCE and hybrid union-find / GRF inference."""
from .cluster import MergeTree, build_merge_tree, ccl_cluster_sizes, change_points, cluster_size_at
from .enhance import (TfceParams, cluster_mass, enhance_many, generalized_statistic, tfce_exact,
                      tfce_riemann)
from .errors import DataError, TfceGrfError
from .estimators import PTFCE, TFCE, SignFlipTFCE, SmoothnessEstimator
from .grf import (ExceedanceTable, GrfParams, ThresholdGrid, build_exceedance_table,
                  cluster_size_density, cluster_size_survival, conditional_exceedance,
                  estimate_smoothness, expected_cluster_size, expected_euler_char,
                  make_threshold_grid, q_function)
from .infer import (EnhancedMap, bh_fdr_select, bonferroni_z_threshold, ptfce_baseline,
                    ptfce_hybrid, two_sided_enhance)
from .perm import NullMaxDistribution, perm_fwer_p, sign_flip_null
from .sim import (PhantomSpec, dice, gaussian_smooth, generate_phantom, one_sample_t_to_z,
                  pearson_r, run_experiment, wilson_interval)
from .volio import Mask3D, SubjectStack, Volume3D

__version__ = "0.1.0"
