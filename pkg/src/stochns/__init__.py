"""Monte Carlo solvers built on stochastic flows.

Submodules: ``fields`` (field types, grid operations, serialisation),
``poisson`` (Brownian Newton-potential estimators), ``flows`` (stochastic
flows and Jacobians), ``parabolic`` (Feynman-Kac solver for linear parabolic
problems), ``picard`` (Navier-Stokes successive approximations), ``apriori``
(bound ODEs and existence horizon) and ``cli`` (batch front end).
"""

__version__ = "0.1.0"
