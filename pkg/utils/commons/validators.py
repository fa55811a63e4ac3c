"""
Validadores e utilitários de formatação compartilhados.
Inclui o acesso às configurações da simulação e o achatamento
de erros vindos dos serializers do DRF.
"""
from rest_framework import serializers

# Padrões usados quando o Django não está configurado (uso como biblioteca).
DEFAULT_SIMULATION = {
    'EVENT_BUDGET': 50_000_000,
    'TOKENS_PER_PAGE': 16,
    'RECOMPUTE_CHUNK_TOKENS': 256,
    'REVIEW_PERIOD_S': 60.0,
    'KV_REVIEW_PERIOD_S': 60.0,
    'METRICS_TICK_S': 10.0,
    'MAX_BATCH': 32,
    'MAX_SHARED_BATCH': 128,
    'MAX_QUEUE_DELAY_MS': 4000.0,
    'DOWNGRADE_QUEUE_MS': 8000.0,
    'MAX_SEQUENCE_LENGTH': 1024,
    'EQUIVALENCE_THRESHOLD': 0.98,
    'SURROGATE_ACCEPTANCE': 192 / 231,
    'PARAM_SHARE_SURCHARGE': 0.08,
}


def simulation_setting(name, default=None):
    """
    Lê um parâmetro do dicionário SIMULATION das settings.

    Args:
        name: Chave do parâmetro (ex.: 'TOKENS_PER_PAGE')
        default: Valor usado se a chave não existir em lugar nenhum

    Returns:
        Valor configurado, o padrão embutido ou `default`.
    """
    from django.conf import settings
    try:
        configured = getattr(settings, 'SIMULATION', {}) or {}
    except Exception:  # settings não configuradas
        configured = {}
    if name in configured:
        return configured[name]
    return DEFAULT_SIMULATION.get(name, default)


def flatten_errors(errors, prefix=''):
    """
    Achata o dicionário aninhado de erros do DRF em linhas
    `caminho.campo: mensagem`.

    Args:
        errors: Erros do serializer (dict, list ou str)
        prefix: Caminho acumulado

    Returns:
        dict: {caminho: mensagem}
    """
    flat = {}
    if isinstance(errors, dict):
        for field, value in errors.items():
            key = f"{prefix}.{field}" if prefix else str(field)
            if field == 'non_field_errors':
                key = prefix or 'non_field_errors'
            flat.update(flatten_errors(value, key))
    elif isinstance(errors, list):
        if errors and all(not isinstance(e, (dict, list)) for e in errors):
            flat[prefix or 'non_field_errors'] = str(errors[0])
        else:
            for index, value in enumerate(errors):
                if value:
                    flat.update(flatten_errors(value, f"{prefix}[{index}]"))
    else:
        flat[prefix or 'non_field_errors'] = str(errors)
    return flat


# ============================================================================
# VALIDADORES DE CAMPO BÁSICOS
# ============================================================================


def validar_fracao(value):
    """Valida frações no intervalo (0, 1]."""
    if value is None or not (0 < value <= 1):
        raise serializers.ValidationError(
            "Deve ser uma fração no intervalo (0, 1]."
        )
    return value


def validar_probabilidade(value):
    """Valida probabilidades no intervalo [0, 1]."""
    if value is None or not (0 <= value <= 1):
        raise serializers.ValidationError(
            "Deve ser uma probabilidade no intervalo [0, 1]."
        )
    return value


def validar_positivo(value):
    """Valida números estritamente positivos."""
    if value is None or value <= 0:
        raise serializers.ValidationError("Deve ser maior que zero.")
    return value
