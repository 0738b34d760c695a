"""relay: config-driven multi-phase multitask and transfer-learning
experiments at desk scale."""

__version__ = "0.1.0"
