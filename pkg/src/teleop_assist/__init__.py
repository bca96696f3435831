"""Shared-autonomy teleoperation sandbox: a human teleoperates a simulated mobile
manipulator while a background engine infers intent from input snippets, gates on
self-consistency, and executes confirmed intents with parameterized skills."""

__version__ = "0.1.0"
