"""Deep conjugate direction method."""
