"""Rolling-horizon evolutionary planning with learned policy and value priors."""

__version__ = "0.1.0"
