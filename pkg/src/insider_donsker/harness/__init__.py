"""Configuration, experiment runners, invariant suite and CLI."""
