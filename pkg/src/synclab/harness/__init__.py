"""Trainers, evaluation, reporting and the command line."""
