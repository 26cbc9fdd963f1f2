# harness/urls.py - READ-ONLY REPORT BROWSING

from django.urls import path
from . import views

app_name = 'harness'

urlpatterns = [
    path('', views.run_list_view, name='run_list'),
    path('<int:run_id>/', views.run_detail_view, name='run_detail'),
]
