"""
Tipos do escalonador: configuração, estimativa de latência, plano de
especulação, contador de localidade e migrações em andamento.
"""
from collections import Counter, deque
from dataclasses import dataclass, field

from django.db import models

from app_kv.models import KvPolicy
from utils.commons.exceptions import ConfigError
from utils.commons.units import US_PER_MS, US_PER_S
from utils.commons.validators import simulation_setting


class ServingMode(models.TextChoices):
    BLOCK = 'block', 'Por blocos'
    PER_MODEL = 'per-model', 'Um motor por modelo'
    PARAM_SHARE = 'param-share', 'Compartilhamento de parâmetros'


class PlacementMode(models.TextChoices):
    LOCALITY = 'locality', 'Localidade'
    FRAG_MIN = 'frag-min', 'Mínima fragmentação'


class SpeculationMode(models.TextChoices):
    OFF = 'off', 'Desligada'
    ON = 'on', 'Ligada'
    # substituto 50x mais rápido e sempre aceito
    IDEAL = 'ideal', 'Ideal'


IDEAL_SPEEDUP = 50.0

# similaridade em que as taxas de aceite dos perfis foram medidas
REFERENCE_ACCEPT_THRESHOLD = 0.95


@dataclass
class SchedulerConfig:
    scale_threshold: float = 0.8
    speculation_top_k: float = 0.10
    equivalence_threshold: float = None
    # similaridade mínima para aceitar a saída do substituto
    surrogate_accept_threshold: float = 0.95
    # probabilidade de aceite quando o perfil não define a sua
    surrogate_acceptance: float = None
    placement_mode: str = PlacementMode.LOCALITY
    kv_policy: str = KvPolicy.BEST_EFFORT
    adaptive: bool = True
    speculation: str = SpeculationMode.OFF
    alpha: float = 1.0
    max_batch: int = None
    # teto do lote de um bloco compartilhado por várias aplicações
    max_shared_batch: int = None
    max_sequence_length: int = None
    review_period_s: float = None
    kv_review_period_s: float = None
    metrics_tick_s: float = None
    # fração da memória reservada a dados de requisição na carga inicial
    placement_reserve: float = 0.3
    # fila (ms) que conta como saturação ao lado do limite de memória
    max_queue_delay_ms: float = None
    # fila do dono (ms) acima da qual o decode é redespachado; 0 desliga
    downgrade_queue_ms: float = None

    def __post_init__(self):
        defaults = {
            'equivalence_threshold': 'EQUIVALENCE_THRESHOLD',
            'surrogate_acceptance': 'SURROGATE_ACCEPTANCE',
            'max_batch': 'MAX_BATCH',
            'max_shared_batch': 'MAX_SHARED_BATCH',
            'max_queue_delay_ms': 'MAX_QUEUE_DELAY_MS',
            'downgrade_queue_ms': 'DOWNGRADE_QUEUE_MS',
            'max_sequence_length': 'MAX_SEQUENCE_LENGTH',
            'review_period_s': 'REVIEW_PERIOD_S',
            'kv_review_period_s': 'KV_REVIEW_PERIOD_S',
            'metrics_tick_s': 'METRICS_TICK_S',
        }
        for attr, setting in defaults.items():
            if getattr(self, attr) is None:
                setattr(self, attr, simulation_setting(setting))
        errors = {}
        for attr in ('scale_threshold', 'speculation_top_k',
                     'surrogate_accept_threshold'):
            value = getattr(self, attr)
            if not 0 < value <= 1:
                errors[f"scheduler.{attr}"] = "fração fora de (0, 1]"
        if not 0 <= self.surrogate_acceptance <= 1:
            errors['scheduler.surrogate_acceptance'] = \
                "probabilidade fora de [0, 1]"
        if self.alpha < 1:
            errors['scheduler.alpha'] = "deve ser >= 1"
        if self.max_batch < 1:
            errors['scheduler.max_batch'] = "deve ser >= 1"
        if self.max_shared_batch < 1:
            errors['scheduler.max_shared_batch'] = "deve ser >= 1"
        if self.max_queue_delay_ms <= 0:
            errors['scheduler.max_queue_delay_ms'] = "deve ser > 0"
        if self.downgrade_queue_ms < 0:
            errors['scheduler.downgrade_queue_ms'] = "deve ser >= 0"
        if errors:
            raise ConfigError("Configuração do escalonador inválida",
                              errors=errors)

    @property
    def review_period_us(self):
        return int(self.review_period_s * US_PER_S)

    @property
    def kv_review_period_us(self):
        return int(self.kv_review_period_s * US_PER_S)

    @property
    def metrics_tick_us(self):
        return int(self.metrics_tick_s * US_PER_S)

    @property
    def max_queue_delay_us(self):
        return int(self.max_queue_delay_ms * US_PER_MS)

    @property
    def downgrade_queue_us(self):
        if not self.downgrade_queue_ms:
            return None
        return int(self.downgrade_queue_ms * US_PER_MS)


@dataclass(frozen=True)
class LatencyEstimate:
    queue_us: int
    compute_us: int
    transfer_us: int
    load_us: int
    block_id: str
    device_id: str
    instance_id: str = None
    stitch_id: str = None

    @property
    def total(self):
        return self.queue_us + self.compute_us + self.transfer_us + \
            self.load_us

    @property
    def is_new(self):
        return self.instance_id is None

    def sort_key(self):
        """Desempate total: transferência, dispositivo, existente antes de
        nova, id da instância."""
        return (self.total, self.transfer_us, self.device_id, self.is_new,
                self.instance_id or '')


@dataclass
class SpeculationPlan:
    instance_ids: tuple = ()
    # instância -> aceleração do substituto
    bindings: dict = field(default_factory=dict)
    planned_at: int = 0

    def __contains__(self, instance_id):
        return instance_id in self.bindings

    def __len__(self):
        return len(self.instance_ids)


class LocalityCounter:
    """
    Encaminhamentos diretos entre pares de blocos numa janela deslizante.
    """

    def __init__(self, window_us):
        self.window_us = window_us
        self._events = deque()
        self._counts = Counter()

    def record(self, block_a, block_b, now, amount=1):
        if block_a == block_b:
            return
        pair = tuple(sorted((block_a, block_b)))
        self._events.append((now, pair, amount))
        self._counts[pair] += amount

    def expire(self, now):
        while self._events and self._events[0][0] < now - self.window_us:
            _, pair, amount = self._events.popleft()
            self._counts[pair] -= amount
            if self._counts[pair] <= 0:
                del self._counts[pair]

    def counts(self, now=None):
        if now is not None:
            self.expire(now)
        return dict(self._counts)


@dataclass
class Placement:
    # decisões na ordem em que foram tomadas
    assignments: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def devices_of(self, block_id):
        return [d for b, d in self.assignments if b == block_id]

    def as_dict(self):
        result = {}
        for block_id, device_id in self.assignments:
            result.setdefault(block_id, []).append(device_id)
        return result


@dataclass
class Migration:
    request_id: str
    block_id: str
    src: str
    dst: str
    plan: object
    started: int
    proactive: bool = False
    pending: int = 0
    callbacks: list = field(default_factory=list)

    @property
    def key(self):
        return (self.request_id, self.block_id)
