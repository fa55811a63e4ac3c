"""
Tipos de carga: especificações sintética e de traço e a chegada de uma
requisição.
"""
from dataclasses import dataclass, field

from django.db import models


class MappingRule(models.TextChoices):
    WEIGHTED_ROUND_ROBIN = 'weighted-round-robin', 'Round-robin ponderado'
    WEIGHTED_RANDOM = 'weighted-random', 'Sorteio ponderado'


@dataclass
class WorkloadSpec:
    apps: list = field(default_factory=list)
    app_count: int = 0
    duration_s: float = 1200.0
    total_requests: int = 400
    # pesos explícitos; vazio -> uniforme(0, 1) por aplicação
    weights: list = field(default_factory=list)
    prompt_range: tuple = (64, 512)
    output_range: tuple = (32, 512)
    max_sequence_length: int = 1024
    shared_prefix_tokens: int = 32
    seed: int = 0

    def app_ids(self):
        if self.apps:
            return list(self.apps)
        return [f"app{i}" for i in range(self.app_count)]


@dataclass
class TraceSpec:
    path: str
    duration_s: float = 1200.0
    window_s: float = 60.0
    min_qps: float = 1.0
    max_qps: float = 45.0
    mapping: str = MappingRule.WEIGHTED_ROUND_ROBIN
    malformed_tolerance: float = 0.01
    prompt_range: tuple = (64, 512)
    output_range: tuple = (32, 512)
    max_sequence_length: int = 1024
    shared_prefix_tokens: int = 32
    seed: int = 0


@dataclass(frozen=True)
class Arrival:
    request_id: str
    arrival_us: int
    app_id: str
    prompt_tokens: int
    output_tokens: int
    prefix_tokens: int = 0

    @property
    def prefix_key(self):
        return self.app_id if self.prefix_tokens else None

    def as_row(self):
        return [self.arrival_us, self.app_id, self.prompt_tokens,
                self.output_tokens]
