"""defreg: symmetric deformable registration with invertible spline fields.

The package registers image pairs by predicting, per resolution level, a
clamped cubic B-spline displacement for each argument order and combining
the two so the whole construction is exactly symmetric, inverse consistent
up to solver tolerance, and topology preserving by construction.
"""

from .errors import ConvergenceError, DefregError, ShapeError, ValidationError
from .fields import (compose, identity_deformation, identity_grid,
                     jacobian_determinants, jacobian_stats, resize_field,
                     resize_volume, warp_image, warp_labels)
from .inversion import FixedPointConfig, fixed_point_invert, invert_field
from .metrics import MetricReport, dice, evaluate, hd95, permutation_test
from .networks import (EncoderConfig, ModelWeights, extract_features,
                       load_weights, predict_control_grid, save_weights)
from .pipeline import (LevelState, RegistrationResult, complete_jacobian_stats,
                       consistency_errors, infer_complete, infer_standard,
                       register)
from .splines import (BoundTable, ControlGrid, bspline_kernel, compute_K,
                      evaluate_spline, gamma_for_level, lipschitz_oracle,
                      tightness_witness, upsample_control_grid)
from .tensor import Parameter, Tensor, backward, no_grad
from .training import (SyntheticPair, TrainConfig, synth_pair, total_loss,
                       train)

__version__ = "0.1.0"

__all__ = [
    "BoundTable", "ControlGrid", "ConvergenceError", "DefregError",
    "EncoderConfig", "FixedPointConfig", "LevelState", "MetricReport",
    "ModelWeights", "Parameter", "RegistrationResult", "ShapeError",
    "SyntheticPair", "Tensor", "TrainConfig", "ValidationError", "backward",
    "bspline_kernel", "complete_jacobian_stats", "compose", "compute_K",
    "consistency_errors", "dice", "evaluate", "evaluate_spline",
    "extract_features", "fixed_point_invert", "gamma_for_level",
    "identity_deformation", "identity_grid", "infer_complete",
    "infer_standard", "invert_field", "jacobian_determinants",
    "jacobian_stats", "hd95", "lipschitz_oracle", "load_weights", "no_grad",
    "permutation_test", "predict_control_grid", "register", "resize_field",
    "resize_volume", "save_weights", "synth_pair", "tightness_witness",
    "total_loss", "train", "upsample_control_grid", "warp_image",
    "warp_labels",
]
