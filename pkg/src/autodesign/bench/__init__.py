"""Experiment harness: synthetic data, constructed nets, configs, CLI and reports."""
