"""Energy transport laboratory."""
