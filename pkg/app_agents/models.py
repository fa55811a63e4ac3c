"""
Tipos do agente de dispositivo: requisição, cadeia de blocos, instância
de bloco e lote.
"""
from dataclasses import dataclass, field

from django.db import models

from app_cluster.models import GATEWAY, Phase


class RequestState(models.TextChoices):
    QUEUED = 'queued', 'Na fila'
    RUNNING = 'running', 'Executando'
    INTERCEPTED = 'intercepted', 'Interceptada'
    DONE = 'done', 'Concluída'


@dataclass
class ChainStep:
    block_id: str
    instance_id: str = None
    stitch_id: str = None
    # bloco efetivamente servido (equivalente quando há serviço adaptativo)
    served_block_id: str = None

    @property
    def resolved(self):
        return self.instance_id is not None


@dataclass
class ChainOfBlocks:
    model_id: str
    steps: list = field(default_factory=list)

    @classmethod
    def from_blocks(cls, model_id, block_ids):
        return cls(model_id, [ChainStep(block_id=b) for b in block_ids])

    def __len__(self):
        return len(self.steps)

    def block_at(self, index):
        return self.steps[index].block_id

    def is_last(self, index):
        return index == len(self.steps) - 1

    def resolve(self, index, instance_id, served_block_id, stitch_id=None):
        step = self.steps[index]
        step.instance_id = instance_id
        step.served_block_id = served_block_id
        step.stitch_id = stitch_id
        return step


@dataclass
class Request:
    id: str
    app_id: str
    arrival: int
    prompt_tokens: int
    target_output_tokens: int
    chain: ChainOfBlocks
    generated_tokens: int = 0
    state: str = RequestState.QUEUED
    priority: bool = False
    prefix_tokens: int = 0
    step: int = 0
    epoch: int = 0
    # dispositivo que guarda a saída mais recente
    location: str = GATEWAY
    # bloco lógico da cadeia -> instância que guarda o KV
    kv_owner: dict = field(default_factory=dict)
    adaptive: bool = False
    speculated: bool = False
    # passo especulado -> fim previsto da verificação
    verifications: dict = field(default_factory=dict)
    step_started: int = 0
    completion: int = None
    # bytes por token da saída que alimenta o próximo passo
    payload_bytes_per_token: int = 4
    # último passo executado com substituto (evita passos adjacentes)
    spec_step: int = -2

    @property
    def phase(self):
        return Phase.PREFILL if self.generated_tokens == 0 else Phase.DECODE

    @property
    def context_tokens(self):
        return self.prompt_tokens + self.generated_tokens

    @property
    def pass_tokens(self):
        """Tokens processados nesta passada: o prompt ou um token."""
        return self.prompt_tokens if self.generated_tokens == 0 else 1

    @property
    def done(self):
        return self.generated_tokens >= self.target_output_tokens

    @property
    def verify_until(self):
        return max(self.verifications.values(), default=0)

    @property
    def prefix_key(self):
        return self.app_id if self.prefix_tokens else None


@dataclass
class Batch:
    block_id: str
    phase: str
    members: list
    formed_at: int
    priority: bool = False
    # época de cada membro no momento do envio
    epochs: dict = field(default_factory=dict)
    # numerado pela simulação (Simulation.next_batch_id)
    id: int = None
    speculated: bool = False
    stitch_id: str = None
    # passo da cadeia de cada membro no momento do envio
    steps: dict = field(default_factory=dict)
    # instância dona do KV usada no agrupamento
    kv_owner: str = None
    attempt: int = 0

    @property
    def size(self):
        return len(self.members)

    @property
    def member_ids(self):
        return [r.id for r in self.members]

    def is_stale(self, request):
        return request.done or self.epochs.get(request.id) != request.epoch

    def live_members(self):
        return [r for r in self.members if not self.is_stale(r)]


@dataclass
class BlockInstance:
    id: str
    block_id: str
    device_id: str
    max_batch: int = 32
    queue: list = field(default_factory=list)
    resident: bool = False
    loading: bool = False
    running: Batch = None
    running_until: int = 0
    created_at: int = 0
    last_used: int = 0
    # relógio de contagem regressiva: requisição -> retorno previsto
    countdown: dict = field(default_factory=dict)

    @property
    def idle(self):
        return not self.queue and self.running is None and not self.loading

    @property
    def queued_requests(self):
        return sum(b.size for b in self.queue)


@dataclass
class Staging:
    """
    Início em etapas de um lote: busca das entradas, migrações de KV e
    carga do bloco. A computação começa quando nada mais está pendente.
    """
    instance: BlockInstance
    batch: Batch
    started: int
    pulls: int = 0
    pending: int = 0
    load_after_pull: bool = False
    # páginas sem KV em lugar nenhum: recomputadas antes do lote
    recompute_pages: int = 0


@dataclass
class Running:
    instance: BlockInstance
    batch: Batch
    start: int
    end: int
    handle: object = None
    activation_key: tuple = None
