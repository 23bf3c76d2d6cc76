from .core import Channel, Engine, EngineParams, GroupRuntime, Operator, Subtask

__all__ = ["Channel", "Engine", "EngineParams", "GroupRuntime", "Operator",
           "Subtask"]
