"""Cloud-edge deep reinforcement learning for a cart-pole swing-up."""

__version__ = "0.1.0"
