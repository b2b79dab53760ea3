# heralded_diqkd/__init__.py
# This file makes 'heralded_diqkd' a Python package.
