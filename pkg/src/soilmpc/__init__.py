"""Irrigation scheduling toolkit: soil moisture simulation, an LSTM
surrogate of root-zone pressure head, and mixed-integer zone MPC with an
exact enumeration solver and a sigmoid-relaxation homotopy."""

__version__ = "0.1.0"
