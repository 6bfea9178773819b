"""Hierarchical Bayesian modelling of sleep-stage dynamics and apnea events.

Submodules
----------
data        PSG epoch/event records and sufficient statistics
simulate    synthetic scenarios with ground truth
model       log posterior and gradient
sampler     NUTS sampler and posterior draws
diagnostics ESS and split R-hat
clustering  Bayes-optimal K-means and assignment probabilities
ppc         posterior predictive checks
factors     loading alignment and scree pre-fit
summaries   weighted summaries, PCA and regression
evaluation  simulation-study drivers
"""

__version__ = "0.1.0"
