"""
Serializers do documento de cenário.
Validam modos, chaves de ablação, faixas numéricas e regras entre campos;
a forma dos documentos de dados (zoo, cluster, perfis) fica com os
JSON Schemas de cada app.
"""
from rest_framework import serializers

from app_kv.models import KvPolicy
from app_scheduler.models import PlacementMode, ServingMode, SpeculationMode
from app_workload.models import MappingRule
from utils.commons.exceptions import ConfigError
from utils.commons.validators import (flatten_errors, simulation_setting,
                                      validar_fracao, validar_positivo,
                                      validar_probabilidade)


class WorkloadKind:
    SYNTHETIC = 'synthetic'
    TRACE = 'trace'
    ARRIVALS = 'arrivals'

    choices = [
        (SYNTHETIC, 'Poisson sintético'),
        (TRACE, 'Reprodução de traço'),
        (ARRIVALS, 'Arquivo de chegadas exportado'),
    ]


# ============================================================================
# SEÇÕES
# ============================================================================


class LengthRangeField(serializers.ListField):
    child = serializers.IntegerField(min_value=1)

    def __init__(self, **kwargs):
        kwargs.setdefault('min_length', 2)
        kwargs.setdefault('max_length', 2)
        super().__init__(**kwargs)

    def to_internal_value(self, data):
        low, high = super().to_internal_value(data)
        if low > high:
            raise serializers.ValidationError(
                "O mínimo da faixa não pode passar do máximo."
            )
        return [low, high]


class WorkloadSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(
        choices=WorkloadKind.choices, default=WorkloadKind.SYNTHETIC
    )
    apps = serializers.ListField(
        child=serializers.CharField(), required=False,
        help_text="Aplicações; vazio usa todos os modelos servidos"
    )
    duration_s = serializers.FloatField(
        default=1200.0, validators=[validar_positivo]
    )
    total_requests = serializers.IntegerField(default=400, min_value=1)
    weights = serializers.ListField(
        child=serializers.FloatField(min_value=0), required=False
    )
    prompt_range = LengthRangeField(default=[64, 512])
    output_range = LengthRangeField(default=[32, 512])
    max_sequence_length = serializers.IntegerField(
        required=False, min_value=2
    )
    shared_prefix_tokens = serializers.IntegerField(default=32, min_value=0)
    path = serializers.CharField(
        required=False, help_text="Traço (trace) ou chegadas (arrivals)"
    )
    window_s = serializers.FloatField(
        default=60.0, validators=[validar_positivo]
    )
    min_qps = serializers.FloatField(default=1.0, validators=[validar_positivo])
    max_qps = serializers.FloatField(
        default=45.0, validators=[validar_positivo]
    )
    mapping = serializers.ChoiceField(
        choices=MappingRule.choices, default=MappingRule.WEIGHTED_ROUND_ROBIN
    )
    malformed_tolerance = serializers.FloatField(
        default=0.01, validators=[validar_probabilidade]
    )

    def validate_weights(self, value):
        if value and sum(value) <= 0:
            raise serializers.ValidationError(
                "Ao menos um peso deve ser positivo."
            )
        return value

    def validate(self, attrs):
        errors = {}
        if attrs['kind'] != WorkloadKind.SYNTHETIC and not attrs.get('path'):
            errors['path'] = f"Obrigatório para cargas '{attrs['kind']}'."
        if attrs['min_qps'] > attrs['max_qps']:
            errors['min_qps'] = "Deve ser <= max_qps."
        apps, weights = attrs.get('apps'), attrs.get('weights')
        if weights and apps and len(weights) != len(apps):
            errors['weights'] = "Um peso por aplicação."
        limit = attrs.setdefault(
            'max_sequence_length', simulation_setting('MAX_SEQUENCE_LENGTH')
        )
        if attrs['prompt_range'][0] + attrs['output_range'][0] > limit:
            errors['prompt_range'] = (
                "Prompt e saída mínimos excedem o comprimento máximo."
            )
        if errors:
            raise serializers.ValidationError(errors)
        return attrs


class AblationSerializer(serializers.Serializer):
    adaptive = serializers.BooleanField(required=False, allow_null=True,
                                        default=None)
    kv_policy = serializers.ChoiceField(
        choices=KvPolicy.choices, default=KvPolicy.BEST_EFFORT
    )
    speculation = serializers.ChoiceField(
        choices=SpeculationMode.choices, default=SpeculationMode.OFF
    )
    placement = serializers.ChoiceField(
        choices=PlacementMode.choices, default=PlacementMode.LOCALITY
    )


class SchedulerSectionSerializer(serializers.Serializer):
    scale_threshold = serializers.FloatField(
        required=False, validators=[validar_fracao]
    )
    speculation_top_k = serializers.FloatField(
        required=False, validators=[validar_fracao]
    )
    surrogate_accept_threshold = serializers.FloatField(
        required=False, validators=[validar_fracao]
    )
    surrogate_acceptance = serializers.FloatField(
        required=False, validators=[validar_probabilidade]
    )
    alpha = serializers.FloatField(required=False, min_value=1)
    max_batch = serializers.IntegerField(required=False, min_value=1)
    max_shared_batch = serializers.IntegerField(required=False, min_value=1)
    max_sequence_length = serializers.IntegerField(required=False,
                                                   min_value=2)
    review_period_s = serializers.FloatField(
        required=False, validators=[validar_positivo]
    )
    kv_review_period_s = serializers.FloatField(
        required=False, validators=[validar_positivo]
    )
    metrics_tick_s = serializers.FloatField(
        required=False, validators=[validar_positivo]
    )
    placement_reserve = serializers.FloatField(
        required=False, min_value=0, max_value=0.95
    )
    max_queue_delay_ms = serializers.FloatField(
        required=False, validators=[validar_positivo]
    )
    downgrade_queue_ms = serializers.FloatField(
        required=False, allow_null=True, min_value=0
    )
    equivalence_threshold = serializers.FloatField(
        required=False, min_value=-1, max_value=1
    )
    surcharge_per_branch = serializers.FloatField(required=False,
                                                  min_value=0)


# ============================================================================
# CENÁRIO
# ============================================================================


class ScenarioSerializer(serializers.Serializer):
    """
    Cenário completo. As seções zoo, cluster e profiles chegam já
    resolvidas (objetos); o schema de cada uma é conferido na leitura.
    """
    schema_version = serializers.IntegerField(default=1, min_value=1,
                                              max_value=1)
    mode = serializers.ChoiceField(
        choices=ServingMode.choices, default=ServingMode.BLOCK
    )
    seed = serializers.IntegerField(default=0, min_value=0)
    zoo = serializers.DictField()
    cluster = serializers.DictField(required=False)
    profiles = serializers.DictField()
    workload = WorkloadSerializer()
    ablation = AblationSerializer()
    scheduler = SchedulerSectionSerializer()
    event_budget = serializers.IntegerField(required=False, min_value=1)
    until_s = serializers.FloatField(required=False,
                                     validators=[validar_positivo])
    out = serializers.CharField(required=False)

    def validate(self, attrs):
        mode = attrs['mode']
        ablation = attrs['ablation']
        errors = {}
        if mode != ServingMode.BLOCK:
            if ablation.get('adaptive'):
                errors['ablation.adaptive'] = (
                    f"Serviço adaptativo não existe no modo '{mode}'."
                )
            if ablation['speculation'] != SpeculationMode.OFF:
                errors['ablation.speculation'] = (
                    f"Especulação exige cadeias de blocos; modo '{mode}'."
                )
        if errors:
            raise serializers.ValidationError(errors)
        if ablation.get('adaptive') is None:
            ablation['adaptive'] = mode == ServingMode.BLOCK
        return attrs


def validate_scenario(document):
    """
    Valida o cenário e devolve os dados normalizados.

    Raises:
        ConfigError: com uma entrada `caminho.campo: mensagem` por erro
    """
    data = dict(document)
    data.setdefault('ablation', {})
    data.setdefault('scheduler', {})
    serializer = ScenarioSerializer(data=data)
    if not serializer.is_valid():
        errors = flatten_errors(serializer.errors)
        raise ConfigError(
            "Cenário inválido: " + '; '.join(
                f"{path}: {message}" for path, message in sorted(
                    errors.items())
            ),
            errors=errors,
        )
    return serializer.validated_data
