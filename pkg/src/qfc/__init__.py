"""qfc: closed-loop quantum feedback control.

Simulates continuously measured qubits (optionally coupled to a damped
reaction-coordinate mode), generates locally optimal feedback labels,
trains transformer and RNN/GRU controllers on them, and evaluates
closed-loop state stabilization.
"""

__version__ = "0.1.0"
