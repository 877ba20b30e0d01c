"""Data generation, training, inference, file formats and the command line."""
