"""Software model of a confidential Kubernetes cluster with an attestation-rooted trust chain."""

__version__ = "0.1.0"
