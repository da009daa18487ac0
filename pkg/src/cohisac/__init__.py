"""Multistatic OFDM radar simulation and processing: over-the-air clock
synchronization, back-projection imaging and Doppler pre-compensated imaging
of moving point targets."""

__version__ = "0.1.0"
