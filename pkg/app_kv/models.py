"""
Tipos do cache KV paginado: páginas, segmentos, planos de migração e
estimativas de interceptação.
"""
from dataclasses import dataclass, field

from django.db import models


class KvPolicy(models.TextChoices):
    # recomputação na cabeça em paralelo com cópia pela cauda
    BEST_EFFORT = 'best-effort', 'Recomputa e copia'
    RECALC_ONLY = 'recalc-only', 'Só recomputa'
    # ignora o dono do KV no despacho e só copia
    LEAST_BUSY = 'least-busy', 'Menos ocupado'


@dataclass
class KvPage:
    id: str
    device: str
    block_id: str
    bytes: int
    span: tuple
    refs: set = field(default_factory=set)
    content_key: tuple = None

    @property
    def ref_count(self):
        return len(self.refs)


@dataclass
class KvSegment:
    """
    Páginas de uma requisição num bloco, em ordem de token, todas no mesmo
    dispositivo.
    """
    request_id: str
    block_id: str
    device: str
    pages: list = field(default_factory=list)
    tokens: int = 0
    bytes_per_token: int = 0
    resume_time_estimate: int = 0

    @property
    def key(self):
        return (self.request_id, self.block_id)

    @property
    def page_ids(self):
        return [p.id for p in self.pages]

    @property
    def bytes(self):
        return sum(p.bytes for p in self.pages)

    @property
    def ref(self):
        """Páginas do segmento referenciadas por mais de uma requisição."""
        return sum(1 for p in self.pages if p.ref_count > 1)


@dataclass
class MigrationPlan:
    segment: KvSegment
    src: str
    dst: str
    recompute_rate: float
    copy_rate: float
    meet_index: int
    completion_us: int

    @property
    def total_pages(self):
        return len(self.segment.pages)

    @property
    def recomputed_pages(self):
        return self.meet_index

    @property
    def copied_pages(self):
        return self.total_pages - self.meet_index

    @property
    def recompute_us(self):
        if not self.meet_index:
            return 0.0
        return self.meet_index / self.recompute_rate

    @property
    def copy_us(self):
        if not self.copied_pages:
            return 0.0
        return self.copied_pages / self.copy_rate

    @property
    def copied_bytes(self):
        return sum(p.bytes for p in self.segment.pages[self.meet_index:])


@dataclass
class InterceptionEstimate:
    request_id: str
    t_call: int
    t_int: int = 0
