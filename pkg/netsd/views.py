"""
REST API under /api/v1. Every file or block request takes the card for the
RAG port, does its work, and hands the card back to the DUT.
"""
import functools
import json
import logging

from django.http import HttpResponse, JsonResponse
from django.views.decorators.csrf import csrf_exempt
from django.views.decorators.http import require_http_methods
from django_ratelimit.decorators import ratelimit

from .exceptions import GrantTimeout, NetSdError
from .forms import BlockCountForm, FaultForm, FormatForm, SwitchForm
from .gateway import get_gateway
from .sd_core import BLOCK_SIZE

logger = logging.getLogger(__name__)


def power_cycle_rate(group, request):
    return get_gateway().config.power_cycle_rate


def api_errors(view):
    """Answer NetSdError in the common JSON error shape."""
    @functools.wraps(view)
    def wrapper(request, *args, **kwargs):
        try:
            return view(request, *args, **kwargs)
        except NetSdError as exc:
            logger.warning("%s %s failed: %s: %s", request.method, request.path, exc.code, exc)
            return JsonResponse(
                {'success': False, 'error': str(exc), 'code': exc.code},
                status=exc.http_status,
            )
    return wrapper


def _json_body(request):
    if not request.body:
        return {}
    try:
        data = json.loads(request.body)
    except ValueError:
        return None
    return data if isinstance(data, dict) else None


def _bad_request(errors):
    return JsonResponse({'success': False, 'error': errors, 'code': 'BadRequest'}, status=400)


# ========================================
# Files and directories
# ========================================

@csrf_exempt
@require_http_methods(["GET"])
@api_errors
def file_list(request):
    path = request.GET.get('path', '/')
    with get_gateway().rag_session(mount=True) as rag:
        entries = rag.volume.list_dir(path)
    return JsonResponse({
        'success': True,
        'path': path,
        'entries': [entry.as_dict() for entry in entries],
        'count': len(entries),
    })


@csrf_exempt
@require_http_methods(["GET", "PUT", "DELETE"])
@api_errors
def file_detail(request, path):
    gateway = get_gateway()

    if request.method == 'GET':
        with gateway.rag_session(mount=True) as rag:
            data = rag.volume.read_file(path)
        return HttpResponse(data, content_type='application/octet-stream')

    if request.method == 'PUT':
        with gateway.rag_session(mount=True) as rag:
            entry, created = rag.volume.write_file(path, request.body)
        return JsonResponse(
            {'success': True, 'created': created, 'entry': entry.as_dict()},
            status=201 if created else 200,
        )

    with gateway.rag_session(mount=True) as rag:
        rag.volume.delete_file(path)
    return JsonResponse({'success': True, 'deleted': path})


@csrf_exempt
@require_http_methods(["PUT"])
@api_errors
def make_dir(request, path):
    with get_gateway().rag_session(mount=True) as rag:
        entry, created = rag.volume.make_dir(path)
    return JsonResponse(
        {'success': True, 'created': created, 'entry': entry.as_dict()},
        status=201 if created else 200,
    )


# ========================================
# Raw blocks
# ========================================

@csrf_exempt
@require_http_methods(["GET", "PUT"])
@api_errors
def blocks(request, lba):
    gateway = get_gateway()

    if request.method == 'GET':
        form = BlockCountForm(request.GET)
        if not form.is_valid():
            return _bad_request(form.errors)
        with gateway.rag_session() as rag:
            data = rag.device.read_blocks(lba, form.cleaned_data['count'])
        return HttpResponse(data, content_type='application/octet-stream')

    body = request.body
    if not body or len(body) % BLOCK_SIZE:
        return _bad_request(f'body must be a non-empty multiple of {BLOCK_SIZE} bytes')
    with gateway.rag_session() as rag:
        rag.device.write_blocks(lba, len(body) // BLOCK_SIZE, body)
    return JsonResponse({'success': True, 'lba': lba, 'count': len(body) // BLOCK_SIZE})


# ========================================
# Switch and power
# ========================================

@csrf_exempt
@require_http_methods(["POST"])
@api_errors
def switch(request):
    data = _json_body(request)
    if data is None:
        return _bad_request('body must be a JSON object')
    form = SwitchForm(data)
    if not form.is_valid():
        return _bad_request(form.errors)
    sd_switch = get_gateway().switch
    with sd_switch.lock:
        if sd_switch.busy:
            raise GrantTimeout('the card is held by an active session')
        grant = sd_switch.grant(form.cleaned_data['port'])
    return JsonResponse({'success': True, 'grant': grant.as_dict()})


@csrf_exempt
@ratelimit(key='ip', rate=power_cycle_rate, method='POST', block=True)
@require_http_methods(["POST"])
@api_errors
def power_cycle(request):
    grant = get_gateway().switch.power_cycle()
    return JsonResponse({'success': True, 'grant': grant.as_dict()})


# ========================================
# Faults
# ========================================

@csrf_exempt
@require_http_methods(["GET", "POST"])
@api_errors
def faults(request):
    injector = get_gateway().faults

    if request.method == 'GET':
        return JsonResponse({
            'success': True,
            'faults': [spec.as_dict() for spec in injector.list()],
        })

    data = _json_body(request)
    if data is None:
        return _bad_request('body must be a JSON object')
    form = FaultForm(data)
    if not form.is_valid():
        return _bad_request(form.errors)
    kind, trigger = form.cleaned_data['fault']
    fault_id = injector.schedule(kind, trigger)
    return JsonResponse({'success': True, 'fault': injector.get(fault_id).as_dict()}, status=201)


@csrf_exempt
@require_http_methods(["DELETE"])
@api_errors
def fault_detail(request, fault_id):
    status = get_gateway().faults.cancel(fault_id)
    return JsonResponse({'success': True, 'id': fault_id, 'status': status.value})


# ========================================
# Status, events, format
# ========================================

@require_http_methods(["GET"])
def status(request):
    return JsonResponse({'success': True, **get_gateway().status()})


@require_http_methods(["GET"])
def events(request):
    try:
        since = int(request.GET.get('since', 0))
    except ValueError:
        return _bad_request('since must be an integer')
    kind = request.GET.get('kind') or None
    found = get_gateway().events.events(kind=kind, since=since)
    return JsonResponse({
        'success': True,
        'events': [event.as_dict() for event in found[-1000:]],
        'last_seq': found[-1].seq if found else since,
    })


@csrf_exempt
@require_http_methods(["POST"])
@api_errors
def format_card(request):
    data = _json_body(request)
    if data is None:
        return _bad_request('body must be a JSON object')
    form = FormatForm(data)
    if not form.is_valid():
        return _bad_request(form.errors)
    info = get_gateway().format_card(label=form.cleaned_data['label'])
    return JsonResponse({'success': True, 'volume': info}, status=201)
