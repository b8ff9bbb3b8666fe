"""Comparametric low-light image enhancement with an unsupervised,
illumination-centric network."""

__version__ = "0.1.0"
