"""
URL Configuration for the VLAttack laboratory
"""
from django.contrib import admin
from django.urls import path, include

urlpatterns = [
    path('admin/', admin.site.urls),
    path('runs/', include('harness.urls')),
]
