from django.urls import path
from . import views

"""
REST API, mounted under /api/v1/
"""

app_name = 'netsd'

urlpatterns = [
    # Files and directories on the FAT volume
    path('files', views.file_list, name='file_list'),
    path('files/<path:path>', views.file_detail, name='file_detail'),
    path('dirs/<path:path>', views.make_dir, name='make_dir'),

    # Raw sectors
    path('blocks/<int:lba>', views.blocks, name='blocks'),

    # Switch and power
    path('switch', views.switch, name='switch'),
    path('power/cycle', views.power_cycle, name='power_cycle'),

    # Fault injection
    path('faults', views.faults, name='faults'),
    path('faults/<int:fault_id>', views.fault_detail, name='fault_detail'),

    # Status and events
    path('status', views.status, name='status'),
    path('events', views.events, name='events'),

    path('format', views.format_card, name='format_card'),
]
