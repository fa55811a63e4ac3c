"""
Tipos do núcleo de simulação: tempo virtual, eventos e handles.

Nenhum destes tipos é persistido; são dataclasses em memória.
"""
from dataclasses import dataclass, field
from typing import Any

from django.db import models


class EventKind(models.TextChoices):
    REQUEST_ARRIVAL = 'request_arrival', 'Chegada de requisição'
    BATCH_START = 'batch_start', 'Início de lote'
    BATCH_FINISH = 'batch_finish', 'Fim de lote'
    TRANSFER_COMPLETE = 'transfer_complete', 'Transferência concluída'
    MIGRATION_STEP = 'migration_step', 'Etapa de migração de KV'
    LOAD_COMPLETE = 'load_complete', 'Carga de bloco concluída'
    SURROGATE_FORWARD = 'surrogate_forward', 'Saída do substituto'
    SPECULATION_VERIFY = 'speculation_verify', 'Verificação especulativa'
    DEFERRED_EMIT = 'deferred_emit', 'Emissão adiada de token'
    RETRY = 'retry', 'Nova tentativa de despacho'
    SCALE_CHECK = 'scale_check', 'Revisão de escala'
    KV_REVIEW = 'kv_review', 'Revisão de KV duplicado'
    PLACEMENT_REVIEW = 'placement_review', 'Revisão de posicionamento'
    METRICS_TICK = 'metrics_tick', 'Amostragem de métricas'
    CUSTOM = 'custom', 'Evento genérico'


@dataclass(order=True)
class Event:
    """
    Evento ordenado por (fire_at, seq). `seq` é atribuído pela simulação.
    """
    fire_at: int
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(default=None, compare=False)
    cancelled: bool = field(default=False, compare=False)


@dataclass(frozen=True)
class EventHandle:
    """Permite cancelar um evento agendado."""
    event: Event

    @property
    def fire_at(self):
        return self.event.fire_at

    @property
    def cancelled(self):
        return self.event.cancelled


@dataclass(frozen=True)
class LogEntry:
    fire_at: int
    seq: int
    kind: str

    def as_line(self):
        return f"{self.fire_at}\t{self.seq}\t{self.kind}"
