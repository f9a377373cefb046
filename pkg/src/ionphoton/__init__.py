"""Phase-controlled photon pairs from a single 40Ca+ ion in an optical cavity.

Modules:

* :mod:`.atomic` -- level scheme and dipole couplings,
* :mod:`.dynamics` -- cavity-QED Hamiltonian, master equation and trajectories,
* :mod:`.effective` -- adiabatic elimination of the P manifolds,
* :mod:`.sequence` -- the two-stage photon-pair protocol and its calibration,
* :mod:`.phase` -- phase-error models and the phase-scan fit,
* :mod:`.tomography` -- waveplates, detectors, post-selection and Bell fidelity,
* :mod:`.config` and :mod:`.cli` -- YAML run configs and the command line.
"""
__version__ = "0.1.0"
