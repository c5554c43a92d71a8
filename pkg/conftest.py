"""Configure Django for pytest the same way manage.py does."""
import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "netsd_gateway.settings")
django.setup()
