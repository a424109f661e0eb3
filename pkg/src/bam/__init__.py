"""Born-again multi-task distillation with teacher annealing, at desk scale."""

__version__ = "0.1.0"
