import os

import django

# The suite is written for Django's test runner; configure settings so pytest can collect it too
os.environ.setdefault("DJANGO_SETTINGS_MODULE", "fat_simulator.settings")
django.setup()
