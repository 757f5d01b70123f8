"""ICNN-assisted optimal power flow for distribution networks."""
