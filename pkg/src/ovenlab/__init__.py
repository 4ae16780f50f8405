"""Dual-task interval-timing laboratory: oven gridworld, recurrent PPO agent and analyses."""

__version__ = "0.1.0"
