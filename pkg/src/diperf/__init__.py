"""diperf: distributed service load testing.

A controller drives a pool of tester agents that repeatedly invoke a
client executable against a target service.  Tester clocks are mapped to
a common base via a central time-stamp server, and per-invocation
records are aggregated offline into response-time, throughput, load,
utilization, and fairness metrics with trend fitting.
"""

__version__ = "0.1.0"
