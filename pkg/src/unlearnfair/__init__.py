"""Class-wise machine-unlearning evaluation on a small numpy autodiff engine.

Submodules:
    tensor, gradcheck   reverse-mode autodiff and finite-difference checks
    nn                  layers, instrumented models, checkpoints
    training            optimizers and the training loop
    data                synthetic blobs, IDX files, retain/forget splits
    unlearning          retraining and approximate unlearning methods
    metrics             fairness gap, FGSM robustness, rank correlation
    harness             experiment config, pipeline, reports, CLI
"""

__version__ = "0.1.0"
