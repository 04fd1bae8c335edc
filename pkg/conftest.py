"""Configure Django before pytest collects the Django test modules."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'moekd_site.settings')
django.setup()
