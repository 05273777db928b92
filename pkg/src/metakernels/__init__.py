"""Infinite-width composite kernels and test-time predictors for multi-task
and head-adapted meta-learning on deep ReLU networks, with finite-width
gradient-descent cross-checks."""

from .composite import (
    AdaptConfig,
    CompositeKernels,
    TaskKernelBundle,
    TestKernels,
    TestTask,
    TrainingSet,
    anil_test_kernel,
    anil_train_kernel,
    composite_kernels,
    g_function,
    kernel_inverse_gap,
    mtl_test_kernel,
    mtl_train_kernel,
    predict_anil,
    predict_mtl,
    prediction_gap,
    spectra_report,
    test_kernels,
    train_grampack,
)
from .kernels import (
    GramPack,
    NetworkSpec,
    SampleMatrix,
    compute_grampack,
    cross_grampack,
    normalize_inputs,
    relu_dual,
)
from .matrixops import apply_spectral, phi_damping, psd_solve, sym_eig
from .mlp import (
    MLPParams,
    TrainConfig,
    anil_loss_and_grad,
    empirical_ntk,
    features,
    fine_tune_and_predict,
    forward,
    init_network,
    mtl_loss_and_grad,
    train_anil,
    train_mtl,
)
from .tasks import (
    TaskDistributionConfig,
    load_tasks,
    sample_test_task,
    sample_training_set,
    save_tasks,
)

__version__ = "0.1.0"
