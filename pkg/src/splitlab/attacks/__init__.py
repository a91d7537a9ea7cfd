"""Data-reconstruction attacks on split-inference representations."""

from splitlab.attacks.blackbox import attack_pfo_blackbox, code_basis, random_search
from splitlab.attacks.cma import CMAES, OracleFailure, QueryBudgetExceeded, QueryOracle, cma_minimize
from splitlab.attacks.common import (
    AttackConfig,
    AttackDiverged,
    AttackResult,
    TargetModified,
    l1_distance,
    match_loss,
    match_loss_grad,
    per_target_mse,
    project_l1_ball,
    project_l1_ball_rows,
    read_only,
)
from splitlab.attacks.pfo import (
    attack_latent_only,
    attack_pfo,
    pfo_initial_selection,
    pfo_optimize_w,
    pfo_progressive,
    stage_radii,
)
from splitlab.attacks.pixel import attack_in, attack_lm, attack_rmle, manifold_penalty

__all__ = [
    "AttackConfig", "AttackDiverged", "AttackResult", "CMAES", "OracleFailure", "QueryBudgetExceeded",
    "QueryOracle", "TargetModified", "attack_in", "attack_latent_only", "attack_lm", "attack_pfo",
    "attack_pfo_blackbox", "attack_rmle", "cma_minimize", "code_basis", "l1_distance", "manifold_penalty",
    "match_loss", "match_loss_grad", "per_target_mse", "pfo_initial_selection", "pfo_optimize_w",
    "pfo_progressive", "project_l1_ball", "project_l1_ball_rows", "random_search", "read_only",
    "stage_radii",
]
