"""Boundary-tree classifiers with learned embeddings.

A boundary tree stores raw training samples and answers queries by greedy
nearest-neighbor descent; misclassified queries become new nodes. Softening
each traversal decision into a softmax over negative embedding distances
makes the tree's prediction differentiable, so an embedding network can be
trained through it and the tree rebuilt under the improving representation.
"""

from .boundary_tree import (
    STOP_LEAF,
    STOP_STAYED,
    BoundaryTree,
    Sample,
    Trace,
    TraceStep,
    TreeFormatError,
    TreeNode,
    build_tree,
    candidate_ids,
    insert_if_wrong,
    load_tree,
    new_tree,
    node_embedding,
    predict_hard,
    save_tree,
    traverse,
)
from .data import (
    DataFormatError,
    Dataset,
    gen_half_moons,
    load_embedding_csv,
    load_idx,
    shuffle_split,
    write_embedding_csv,
)
from .soft_path import (
    SIBLING_MODES,
    ClassLogProb,
    Decision,
    PathTrace,
    class_log_prob,
    greedy_path,
    loss,
    loss_and_grad,
    path_log_prob,
    predict_soft,
)
from .tape import LOG_FLOOR, ShapeError, Tape, grad_check, l2_value
from .trainer import (
    IterRecord,
    TrainConfig,
    TrainingDivergedError,
    TrainLog,
    converged,
    evaluate,
    train,
    write_train_log,
)
from .transform import (
    AdamState,
    CheckpointFormatError,
    MlpArchitecture,
    NonFiniteGradientError,
    ParameterSet,
    ParamGrads,
    adam_step,
    bind_params,
    collect_param_grads,
    embed,
    forward,
    identity_embedder,
    init_params,
    load_adam_state,
    load_checkpoint,
    make_embedder,
    save_adam_state,
    save_checkpoint,
)

__version__ = "0.1.0"
