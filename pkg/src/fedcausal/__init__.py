"""Federated causal effect estimation: FedCI, CausalRFF and CausalFI."""

__version__ = "0.1.0"
