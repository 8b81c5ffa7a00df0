"""Command-line driver: workloads, traces, runs, calibration, serving simulation, reports."""
