"""Desk-scale simulator for personalized federated adapter tuning.

Clients fine-tune low-rank adapters on a frozen random-feature backbone;
the server aggregates them FedAvg-style and trains a selective state
space sequence model on the history of client updates to emit per-client
calibrations of the global adapter.
"""

__version__ = "0.1.0"
