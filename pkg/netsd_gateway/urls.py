"""
URL configuration for netsd_gateway project.

Everything the gateway serves over HTTP lives in the netsd app under
/api/v1/, so the versioned schema can change without touching this file.
"""
from django.urls import path, include


urlpatterns = [
    path("api/v1/", include("netsd.urls")),
]
