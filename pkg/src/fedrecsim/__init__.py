"""Federated news-recommendation poisoning simulator."""
