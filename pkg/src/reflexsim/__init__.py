"""Deterministic virtual-time simulation of a network reflex plane.

The package composes four building blocks inside one discrete-event
simulator: INT telemetry report processing, prioritized multi-field
classification, anomaly-detecting monitors, and a Raft-replicated
network-state store. All latencies are integer nanoseconds of virtual
time; identical (config, seed) pairs reproduce identical runs.
"""

__version__ = "0.1.0"
