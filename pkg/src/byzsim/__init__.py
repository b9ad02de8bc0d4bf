"""byzsim: deterministic simulator for Byzantine-robust compressed optimization."""

from .aggregators import (CM, GM, Bucketed, Krum, Mean, aggregate,
                          robustness_certificate)
from .algorithms import (ALGORITHMS, HyperParams, ServerState, StepsizeInputs,
                         StreamBundle, WorkerState, delta_tolerance, init_states,
                         stepsize_dasha, stepsize_ef21, stepsize_ef21bc,
                         stepsize_marina, stepsize_marina2, stepsize_pl)
from .attacks import (AdversaryView, ALittleIsEnough, BitFlipping,
                      InnerProductManipulation, LabelFlipping, Mimic, craft)
from .compressors import (CompressedMsg, Identity, Natural, RandK,
                          ScaledUnbiased, TopK, alpha, compress, decompress, omega)
from .core import RngStream, dot, finite_diff_grad, norm_sq, sample_without_replacement
from .harness import (ExperimentConfig, RunResult, RunRow, emit_csv, load_libsvm,
                      parse_config_file, partition, run,
                      synthetic_logistic_dataset)
from .objective import (LabeledDataset, LogisticObjective, QuadraticObjective,
                        Regularizer, SmoothnessConstants, estimate_constants,
                        estimate_f_star, global_grad, global_loss)

__version__ = "0.1.0"
