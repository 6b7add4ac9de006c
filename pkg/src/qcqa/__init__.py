"""Evolutionary search for grouped key/value attention head layouts.

The public surface is re-exported here; see the submodules for details.
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    KEEP_MHA,
    AcCandidate,
    EcCandidate,
    FrontEntry,
    LayerGrouping,
    LayerWeights,
    ModelPlan,
    ParetoFront,
    WeightArchive,
    decode_ac,
    decode_ec,
    gqa_baseline,
    head_matrix,
    random_ec,
)
from .errors import *  # noqa: E402,F401,F403
from .kvcache import layer_kv_fraction, model_kv_fraction  # noqa: E402
from .wse import feature_wse, layer_wse, mean_pool, model_wse  # noqa: E402
