"""Federated simulation of embedding-conditioned, hypernetwork-generated classifiers."""
