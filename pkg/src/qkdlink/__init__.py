"""Phase-encoded BB84 link simulator with analytic rate and security models.

Modules
-------
photonics
    Source, fiber, filter and detector physics.
protocol
    Alice and Bob engines and sifting over the public channel.
timing
    Arrival-time histograms, peak fitting and window selection.
security
    Rate model, QBER thresholds and secret-key fraction.
postproc
    Reconciliation, verification and privacy amplification.
simulate
    Complete Monte Carlo sessions.
experiment
    Configuration files, sweeps, calibration and result tables.
"""

__version__ = "0.1.0"
