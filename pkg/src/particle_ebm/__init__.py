"""Energy-based density estimation with particle ensembles that follow the
energy as it is trained.

Modules:
    diffcore: energy models and their x/theta derivatives.
    targets: toy 2-D target densities.
    kernels: rbf and neural-tangent kernels, MMD estimators.
    samplers: particle vector fields, Langevin steps, replay buffer.
    trainer: training loops for all methods and the metrics schedule.
    metrics: grid quadrature, log-likelihood, mode coverage.
    config: YAML run configuration.
    cli: artifact writer and command line entry point.
"""

__version__ = "0.1.0"
