"""Coordinated multicell OFDMA beamforming."""
