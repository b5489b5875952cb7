"""Tree models with in-scale conditional covariance corrections."""
from .augment import PatchGeometry, augment_shifted_samples
from .em import EMResult, canonicalize, learn_tree_em
from .inscale import BlockPartition, block_partition, local_inverse, target_inscale_information
from .model import (InferResult, MultiresConfig, MultiresModel, ScaleBlock, implied_covariance,
                    infer, learn_multires, model_loglikelihood, observed_information)
from .sparsify import sparsify_logdet
from .targets import (ScaleTargets, scale_maps, target_scale_covariances,
                      target_scale_covariances_naive)
from .tree import (TreeParams, TreeTopology, build_quadtree, sample_tree, topology_from_parents,
                   tree_information)
