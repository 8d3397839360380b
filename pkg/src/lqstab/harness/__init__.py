"""Configuration, Monte Carlo runner, report emission and the command line."""
