"""Neural SDE calibration engine: models, hedging control variates, price bounds."""

__version__ = "0.1.0"
