"""Semi-asynchronous federated training of a deep auto-encoder attack detector."""

__version__ = "0.1.0"
