# This file makes the 'agents' directory a Python package.
