# heralded_diqkd/utils/__init__.py
# This file makes 'utils' a Python package.
