"""Multimodal federated air-quality estimation: a numpy MLP with FiLM fusion,
FedAvg over mutual-TLS sockets, non-IID partitioning, metrics and profiling."""

__version__ = "0.1.0"
