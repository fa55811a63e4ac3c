"""
Registros de requisição e fatos do log de métricas.
"""
from dataclasses import dataclass, field

from django.db import models


class FactKind(models.TextChoices):
    ARRIVAL = 'arrival', 'Chegada'
    INTERVAL = 'interval', 'Intervalo de etapa'
    TOKENS = 'tokens', 'Tokens gerados'
    COMPLETION = 'completion', 'Conclusão'
    BUSY = 'busy', 'Dispositivo ocupado'
    MEMORY = 'memory', 'Amostra de memória'
    COUNTER = 'counter', 'Contador'
    DECISION = 'decision', 'Decisão do escalonador'
    FLAG = 'flag', 'Marca de requisição'


class StepCategory(models.TextChoices):
    QUEUE = 'queue', 'Fila'
    COMPUTE = 'compute', 'Computação'
    TRANSFER = 'transfer', 'Transferência'
    LOAD = 'load', 'Carga de bloco'
    MIGRATION = 'migration', 'Migração de KV'


@dataclass
class RequestRecord:
    request_id: str
    app_id: str
    arrival: int
    completion: int = None
    tokens: int = 0
    intervals: list = field(default_factory=list)
    adaptive: bool = False
    speculated: bool = False

    @property
    def done(self):
        return self.completion is not None

    @property
    def latency(self):
        return None if self.completion is None else \
            self.completion - self.arrival


@dataclass(frozen=True)
class Fact:
    t: int
    kind: str
    data: tuple

    def as_line(self):
        return f"{self.t} {self.kind} " + ' '.join(str(v) for v in self.data)
