"""Railway line traffic simulator with passenger flow and RL rescheduling."""

__version__ = "0.1.0"
