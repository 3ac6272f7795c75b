"""Aircraft trajectory prediction by clustering, classification and adversarial imitation."""

__version__ = "0.1.0"
