"""Tiny differentiable dual-branch network."""
