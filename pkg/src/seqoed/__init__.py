"""Policy-gradient sequential Bayesian experimental design.

The package trains deterministic design policies for multi-stage experiments
by maximizing a variational lower bound on expected information gain, using
an actor-critic scheme whose rewards are log posterior-to-prior density
ratios evaluated at each episode's generating sample.  Amortized posterior
predictors (categorical, Gaussian-mixture, or coupling-flow families) supply
the variational densities; exact enumeration oracles on finite problems
certify the estimator identities the training objective relies on.

Subpackages / modules
---------------------
prob          log-space Gaussian / truncated-Gaussian / mixture primitives
nn            minimal reverse-mode autodiff over dense feed-forward nets
kernels       numba-accelerated hot loops with pure-numpy fallbacks
posteriors    amortized posterior predictor families and history encodings
rewards       information-gain reward assembly (terminal / incremental)
agent         replay buffer, exploration, actor-critic training loop
environments  source location, constant-elasticity consumer choice,
              epidemic SDE, and finite tabular problems
evaluation    mutual-information estimators and policy evaluation
oracle        exact enumeration utilities and identity certification
cli           command-line entry points
"""

__version__ = "0.1.0"
