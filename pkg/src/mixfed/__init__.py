"""Decentralized federated learning over a peer-based mixnet.

Every node is both a learner and a mix relay: model updates travel as
fixed-size layered packets with cover traffic and randomized timing, are
aggregated identity-free from fragments, and a passive-observer harness
measures the resulting unlinkability.
"""

__version__ = "0.1.0"
