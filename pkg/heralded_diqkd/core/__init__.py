# heralded_diqkd/core/__init__.py
# This file makes 'core' a Python package.
