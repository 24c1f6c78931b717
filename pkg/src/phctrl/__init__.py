"""Co-learning of port-Hamiltonian dynamics models and energy-balancing
passivity-based controllers from simulated trajectory data."""

from ._kernels import HAS_NUMBA
from .autodiff import (Architecture, GradCheck, ParamSet, Tape, TapeProgram,
                       Var, build_grad, check_gradient, grad,
                       init_mlp_params, input_gradient_differentiable,
                       mlp_forward, mlp_input_grad)
from .control import (ControllerHandle, closed_loop_energy_rate,
                      desired_hamiltonian, ebpbc_control, matching_residual,
                      pd_plus_control, standard_ebpbc_2link)
from .evaluation import (CertificateReport, CertificateSpec, certify,
                         effort_metrics, error_bands, relative_error,
                         terminal_error, wrapped_norm)
from .odeint import (DivergenceError, Trajectory, constant_input, rk4_step,
                     rollout, rollout_batch)
from .phmodel import (EnergyShapingPolicy, PhaseState, StructuredPHModel,
                      load_checkpoint, save_checkpoint)
from .plants import (Dataset, PlantSpec, make_plant, planar_pendulum,
                     policy_excited_dataset, sample_ics,
                     step_excited_dataset, torsional_pendulum,
                     two_link_torsional)
from .training import (AdamState, AlternationConfig, CostConfig, TrainRun,
                       adam_update, alternate_optimize, cosine_lr,
                       dissipation_regularizer, phi_step,
                       policy_cost_stabilization, policy_cost_swingup,
                       system_id_loss, theta_step)

__version__ = "0.1.0"
