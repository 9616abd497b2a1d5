"""Federated multi-discriminator BiWGAN-GP anomaly detection for VM
resource metrics, on a simulated three-tier topology with exact message
and compute cost accounting."""

__version__ = "0.1.0"
