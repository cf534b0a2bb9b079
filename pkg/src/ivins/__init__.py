"""Visual-inertial state estimation with invariant-error filters.

Library layout:

- ``lie``         rotation-group and rigid-body primitives
- ``states``      state tuples, retraction pairs, unobservable transformations
- ``ekf``         generic continuous-discrete EKF engine
- ``filters``     full-state VINS filters (conventional and right-invariant)
- ``msckf``       sliding-window filters (MSCKF and RI-MSCKF)
- ``invariance``  executable invariance/observability checks
- ``sim``         trajectory + sensor synthesis, Monte Carlo harness
- ``metrics``     RMS / NEES evaluation
- ``cli``         ``ivins`` command-line entry point
"""

__version__ = "0.1.0"
