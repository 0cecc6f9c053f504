"""EV aggregator operating pipeline: day-ahead scheduling, rolling
balancing-market re-optimisation, and transactive price negotiation
against distribution-network limits."""

__version__ = "0.1.0"
