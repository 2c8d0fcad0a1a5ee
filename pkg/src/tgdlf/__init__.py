"""Theory-guided day-ahead load forecasting: weekly dimensionless trend plus a
Transformer-predicted local fluctuation, with cross-district transfer."""

__version__ = "0.1.0"
