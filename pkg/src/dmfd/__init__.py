"""Learning deformable-object manipulation from expert demonstrations, at desk scale."""

__version__ = "0.1.0"
