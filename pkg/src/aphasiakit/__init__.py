"""Joint disordered-speech recognition and Aphasia detection at desk scale."""

__version__ = "0.1.0"
