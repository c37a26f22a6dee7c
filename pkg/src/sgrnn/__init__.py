"""Recurrent network training with stochastic-gradient MCMC samplers
(SGLD, preconditioned SGLD) and their optimization counterparts (SGD,
RMSprop), posterior snapshot collection, and test-time model averaging.
"""

__version__ = "0.1.0"
