"""Spread-out Bernoulli percolation: exact oracles, Monte Carlo estimators and random walks."""
