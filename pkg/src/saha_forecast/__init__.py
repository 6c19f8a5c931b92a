"""Oxygenation forecasting across a simulated ARDS-like transition.

Subpackages: ``twin`` (synthetic gas-exchange episodes), ``features`` (13-d
inputs), ``gbdt`` (boosted trees), ``monolith`` (single-model baseline),
``saha`` (hierarchical agent network), ``structopt`` (PSO structure search)
and ``harness`` (adaptation-window sweep).
"""

__version__ = "0.1.0"
