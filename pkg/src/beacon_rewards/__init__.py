"""Post-merge Ethereum consensus reward engine, simulator and analyzer."""

__version__ = "0.1.0"
