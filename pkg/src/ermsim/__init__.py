"""Emergency responder rebalancing: discrete-event simulation, queue-based and MCTS planners."""

__version__ = "0.1.0"
