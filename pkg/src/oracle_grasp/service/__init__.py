"""HTTP service exposing prediction and evaluation."""
