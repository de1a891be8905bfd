"""Residual-CNDS: deeply supervised CNNs with residual shortcuts, in plain numpy."""
from .graph import (ArchConfig, NetworkGraph, backward, build_cnds, build_conv_stack, forward,
                    infer_shapes, init_params, insert_residual_connections, load_arch, save_arch)
from .placement import GradientReport, run_probe, select_branch_point
from .supervision import (SupervisionSchedule, alpha_at, combined_loss, cross_entropy,
                          softmax_prob, softmax_xent_backward)
from .trainer import TrainConfig, evaluate, lr_at, sgd_step, train

__version__ = "0.1.0"
