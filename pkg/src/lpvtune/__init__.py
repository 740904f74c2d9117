"""Auto-tuning of structured LPV motion controllers from local FRF data."""

from .autotune import (BfgsConfig, CostConfig, PsoConfig, TuneResult, TuningProblem, autotune,
                       bfgs_refine, pso_search)
from .controller import (ControllerStructure, GeneralizedController, LfrBlock, demo_structure,
                         freeze_controller, interconnect, lead_to_lfr, notch_to_lfr, pi_to_lfr)
from .discretize import DtController, discretize, dt_frf, simulate_step
from .frf import FrequencyGrid, FrfSet, LocalFrf, load_frf_set, save_frf_set
from .plant import ModalPlant, demo_plant, modal_transform, rb_decoupling, sample_frf_set
from .shaping import WeightSet, weighted_norm
from .stability import IntegratorDeclaration, StabilityVerdict, assess_stability, winding_number

__version__ = "0.1.0"
