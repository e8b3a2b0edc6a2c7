"""Dynamic-precision quantized decoding for a desk-scale transformer.

One nested quantized store serves every bitwidth from 3 to 6; per-layer
thresholds learned from a calibration set pick the precision of each linear
layer at every decode step.
"""

from .model import (KINDS, LayerId, ModelConfig, ModelWeights, init_model,
                    export_weights, load_weights, forward, backward,
                    teacher_forced_loss)
from .quant import (QuantizedLayer, BitPlaneStore, quantize_layer, dequantize,
                    delta_weights, quantize_model, save_store, load_store,
                    file_hash)
from .sensitivity import SensitivityProfile, profile, save_profile, load_profile
from .allocator import (BudgetProblem, BitAssignment, InfeasibleError, solve,
                        static_plan_llm_mq, static_plan_hawq)
from .fitter import FitConfig, PrecisionParams, fit
from .estimator import (ErrorEstimator, translate_threshold,
                        collect_error_samples, build_estimator)
from .runtime import (PrecisionPlan, PlanLayer, DecodeEngine, DecodeTrace,
                      ProvenanceError, decode, eval_perplexity, qos_stats,
                      save_plan, load_plan, sentinel_static_plan)
from .planner import build_dp_plan, build_static_baseline

__version__ = "0.1.0"
