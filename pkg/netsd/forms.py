from django import forms

from .exceptions import InvalidSpec
from .faults import KINDS, parse_fault


class SwitchForm(forms.Form):
    """Body of POST /switch: which port gets the card."""
    port = forms.CharField(max_length=32)

    def clean_port(self):
        return self.cleaned_data['port'].strip()


class FaultForm(forms.Form):
    """
    Body of POST /faults, e.g.
    {"kind": "omit", "params": {"match": 17, "count": 1},
     "trigger": {"type": "at_transaction", "n": 40}}
    """
    kind = forms.ChoiceField(choices=[(name, name) for name in sorted(KINDS)])
    params = forms.JSONField(required=False)
    trigger = forms.JSONField(required=False)

    def clean(self):
        cleaned_data = super().clean()
        if self.errors:
            return cleaned_data
        params = cleaned_data.get('params') or {}
        trigger = cleaned_data.get('trigger') or None
        if not isinstance(params, dict):
            raise forms.ValidationError('params must be an object.')
        if trigger is not None and not isinstance(trigger, dict):
            raise forms.ValidationError('trigger must be an object.')
        try:
            cleaned_data['fault'] = parse_fault({
                'kind': cleaned_data['kind'],
                'params': params,
                'trigger': trigger,
            })
        except InvalidSpec as exc:
            raise forms.ValidationError(str(exc))
        return cleaned_data


class BlockCountForm(forms.Form):
    count = forms.IntegerField(min_value=1, max_value=65536, required=False)

    def clean_count(self):
        return self.cleaned_data['count'] or 1


class FormatForm(forms.Form):
    label = forms.CharField(max_length=11, required=False)

    def clean_label(self):
        label = self.cleaned_data['label'].strip() or 'NO NAME'
        if not label.isascii():
            raise forms.ValidationError('Volume label must be ASCII.')
        return label.upper()
