# Hyphenated command name; the implementation lives in export_curves.py
from .export_curves import Command
