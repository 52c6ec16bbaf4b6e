"""Lipschitz-bounded stochastic-stream classifiers with dual certification."""

from .certifier import Certificate, McConfig, certify, lip_certify, rs_certify
from .network import HycasNetwork, build_network, calibrate, network_lip_bound
from .noise import NoiseState

__all__ = [
    "Certificate", "McConfig", "certify", "lip_certify", "rs_certify",
    "HycasNetwork", "build_network", "calibrate", "network_lip_bound", "NoiseState",
]
