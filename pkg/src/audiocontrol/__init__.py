"""Fine-grained controllable text-to-audio generation at desk scale.

Condition extraction (loudness, pitch, sound-event rolls), a small
flow-matching MMDiT/DiT backbone with ControlNet and adapter control
branches, an event-roll audio editor, and the evaluation metrics.
"""
__version__ = "0.1.0"
