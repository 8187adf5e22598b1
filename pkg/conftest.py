import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'rotlab.settings')
django.setup()
