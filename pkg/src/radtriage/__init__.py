"""Radiograph abnormality triage with a SigLIP-style vision tower and an MLP head."""

__version__ = "0.1.0"
