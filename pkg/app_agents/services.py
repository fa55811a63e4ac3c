"""
Agente de dispositivo.

Cada dispositivo executa um lote por vez entre as suas instâncias. Um
lote que chega à cabeça da fila passa pelo início em etapas (busca das
entradas, migração de KV, carga do bloco) e só então computa. Ao terminar,
as requisições que atingiram EOS saem e as demais seguem para o próximo
passo da cadeia pelo escalonador.
"""
import logging
from functools import partial

from app_agents.models import Batch, RequestState, Running, Staging
from app_cluster.models import MemoryCategory, Phase
from app_cluster.services import phase_length, swap_time
from app_engine.models import EventKind
from app_kv.services import recompute_rate
from app_metrics.models import StepCategory
from utils.app_cluster.exceptions import CapacityExhaustedError
from utils.app_kv.exceptions import KvAllocationError
from utils.commons.units import ceil_us, round_half_up_us

logger = logging.getLogger(__name__)

# id de token devolvido ao início da cadeia
TOKEN_BYTES = 4
BACKOFF_START_US = 100
BACKOFF_CAP_US = 10_000


def backoff_us(attempt):
    """100 µs dobrando a cada tentativa, limitado a 10 ms."""
    return min(BACKOFF_START_US * 2 ** attempt, BACKOFF_CAP_US)


def enqueue(instance, batch):
    """
    Fila FIFO com prioridade estável: lotes prioritários entram depois dos
    prioritários já na fila e antes de todos os comuns.

    Returns:
        int: posição em que o lote foi inserido
    """
    if batch.priority:
        position = next(
            (i for i, queued in enumerate(instance.queue)
             if not queued.priority),
            len(instance.queue),
        )
    else:
        position = len(instance.queue)
    instance.queue.insert(position, batch)
    return position


def _drop_stale_head(queue):
    while queue:
        head = queue[0]
        head.members = head.live_members()
        if head.members:
            return head
        queue.pop(0)
    return None


def form_batch(instance, now):
    """
    Junta lotes da cabeça da fila enquanto o total cabe em max_batch.

    Lotes não são divididos: o primeiro é sempre executado, mesmo sozinho.
    A junção para no primeiro lote de fase ou costura diferente.

    Returns:
        Batch | None
    """
    queue = instance.queue
    head = _drop_stale_head(queue)
    if head is None:
        return None
    taken = [queue.pop(0)]
    size = head.size
    while queue:
        candidate = _drop_stale_head(queue)
        if candidate is None:
            break
        if candidate.phase != head.phase or \
                candidate.stitch_id != head.stitch_id or \
                size + candidate.size > instance.max_batch:
            break
        taken.append(queue.pop(0))
        size += candidate.size
    if len(taken) == 1:
        return head

    merged = Batch(
        id=head.id,
        block_id=head.block_id,
        phase=head.phase,
        members=[r for part in taken for r in part.members],
        formed_at=head.formed_at,
        priority=head.priority,
        stitch_id=head.stitch_id,
        kv_owner=head.kv_owner,
    )
    for part in taken:
        merged.epochs.update(part.epochs)
        merged.steps.update(part.steps)
    logger.debug("%s: %d lotes juntados em t=%d (%d requisições)",
                 instance.id, len(taken), now, size)
    return merged


class DeviceAgent:
    """
    Máquina de estados de um dispositivo, dirigida pelos eventos do motor.
    """

    def __init__(self, scheduler, device):
        self.scheduler = scheduler
        self.sim = scheduler.sim
        self.device = device
        self.instances = {}
        self.stage = None
        self.current = None

    @property
    def working(self):
        return self.stage is not None or self.current is not None

    def attach(self, instance):
        self.instances[instance.id] = instance

    def detach(self, instance):
        self.instances.pop(instance.id, None)

    def next_instance(self):
        """Cabeça prioritária, depois formação mais antiga, depois menor id."""
        ready = [i for i in self.instances.values() if i.queue]
        if not ready:
            return None
        return min(ready, key=lambda i: (not i.queue[0].priority,
                                         i.queue[0].formed_at, i.id))

    def kick(self):
        while not self.working:
            instance = self.next_instance()
            if instance is None:
                return
            batch = form_batch(instance, self.sim.now)
            if batch is not None:
                self._stage(instance, batch)

    # ------------------------------------------------------------------
    # Início em etapas
    # ------------------------------------------------------------------

    def _stage(self, instance, batch):
        scheduler = self.scheduler
        now = self.sim.now
        stage = Staging(instance=instance, batch=batch, started=now)
        self.stage = stage
        instance.running = batch

        by_source = {}
        for request in batch.members:
            scheduler.metrics.interval(request.id, StepCategory.QUEUE,
                                       request.step_started, now)
            request.state = RequestState.RUNNING
            nbytes = request.payload_bytes_per_token * request.pass_tokens
            by_source.setdefault(request.location, []).append(
                (request, nbytes)
            )
        for source in sorted(by_source):
            entries = by_source[source]
            stage.pulls += 1
            scheduler.network.start(
                source, self.device.id, sum(n for _, n in entries),
                on_done=partial(self._pulled, stage,
                                [r for r, _ in entries]),
                tag='pull',
            )

        if str(batch.phase) == Phase.DECODE:
            for request in batch.members:
                scheduler.ensure_kv(request, instance, stage, self._kv_ready)

        if not instance.resident:
            stage.pending += 1
            if self.device.is_busy:
                stage.load_after_pull = True
            else:
                self._start_load(stage)

    def _pulled(self, stage, members, job):
        if self.stage is not stage:
            return
        for request in members:
            self.scheduler.metrics.interval(
                request.id, StepCategory.TRANSFER, job.start, job.end
            )
        stage.pulls -= 1
        if stage.pulls == 0 and stage.load_after_pull:
            stage.load_after_pull = False
            self._start_load(stage)
        self._maybe_compute(stage)

    def _kv_ready(self, stage, migration=None):
        if self.stage is not stage:
            return
        if migration is not None:
            for request in stage.batch.members:
                if request.id == migration.request_id:
                    self.scheduler.metrics.interval(
                        request.id, StepCategory.MIGRATION,
                        migration.started, self.sim.now,
                    )
        stage.pending -= 1
        self._maybe_compute(stage)

    def _start_load(self, stage):
        scheduler = self.scheduler
        instance = stage.instance
        profile = scheduler.profiles.profile(instance.block_id)
        evicted = scheduler.make_room(self.device, profile.param_bytes,
                                      keep=instance)
        if evicted is None:
            stage.pending -= 1
            self._requeue(stage)
            return
        self.device.ledger.allocate(MemoryCategory.PARAMS, instance.id,
                                    profile.param_bytes)
        instance.loading = True
        duration = swap_time(profile.param_bytes,
                             [e.param_bytes for e in evicted], self.device)
        scheduler.metrics.count(self.sim.now, 'block_loads')
        self.sim.after(duration, EventKind.LOAD_COMPLETE, {
            'device': self.device.id, 'stage': stage,
            'started': self.sim.now,
        })

    def on_load_complete(self, event):
        stage = event.payload['stage']
        instance = stage.instance
        instance.loading = False
        instance.resident = True
        for request in stage.batch.members:
            self.scheduler.metrics.interval(
                request.id, StepCategory.LOAD, event.payload['started'],
                self.sim.now,
            )
        if self.stage is not stage:
            return
        stage.pending -= 1
        self._maybe_compute(stage)

    def _requeue(self, stage):
        """Devolve o lote à cabeça da fila e tenta de novo após o recuo."""
        instance = stage.instance
        instance.queue.insert(0, stage.batch)
        instance.running = None
        self.stage = None
        self.scheduler.metrics.count(self.sim.now, 'retries')
        self.sim.after(backoff_us(stage.batch.attempt), EventKind.RETRY,
                       {'device': self.device.id})
        stage.batch.attempt += 1
        logger.debug("%s: lote devolvido à fila (tentativa %d)",
                     instance.id, stage.batch.attempt)

    def _maybe_compute(self, stage):
        if self.stage is stage and stage.pulls == 0 and stage.pending == 0:
            self._compute(stage)

    # ------------------------------------------------------------------
    # Computação
    # ------------------------------------------------------------------

    def _reserve_memory(self, instance, batch, profile):
        scheduler = self.scheduler
        ledger = self.device.ledger
        activation_bytes = sum(
            r.pass_tokens * profile.activation_bytes_per_token
            for r in batch.members
        )
        needed = activation_bytes + scheduler.kv_growth_bytes(
            batch.members, instance
        )
        if needed > ledger.free:
            scheduler.make_room(self.device, needed, keep=instance)
        key = ('batch', batch.id)
        ledger.allocate(MemoryCategory.ACTIVATIONS, key, activation_bytes)
        if profile.kv_bytes_per_token:
            pool = self.device.kv_pool
            # tokens de cada segmento antes deste lote (None: segmento novo)
            before = {}
            try:
                for request in batch.members:
                    segment = pool.segments.get((request.id, instance.block_id))
                    before[request.id] = segment and segment.tokens
                    pool.alloc(
                        request.id, instance.block_id, request.context_tokens,
                        profile.kv_bytes_per_token, request.prefix_key,
                        request.prefix_tokens,
                    )
            except KvAllocationError:
                for request_id, tokens in before.items():
                    if not pool.has_segment(request_id, instance.block_id):
                        continue
                    if tokens is None:
                        pool.release(request_id, instance.block_id)
                    else:
                        pool.truncate(request_id, instance.block_id, tokens)
                ledger.release(MemoryCategory.ACTIVATIONS, key)
                raise
        for request in batch.members:
            scheduler.note_kv(request, batch.steps[request.id], instance)
        return key

    def _compute(self, stage):
        scheduler = self.scheduler
        now = self.sim.now
        instance, batch = stage.instance, stage.batch
        batch.members = batch.live_members()
        if not batch.members:
            instance.running = None
            self.stage = None
            self.kick()
            return

        profile = scheduler.profiles.profile(instance.block_id)
        try:
            key = self._reserve_memory(instance, batch, profile)
        except (KvAllocationError, CapacityExhaustedError):
            self._requeue(stage)
            return

        length = max(
            phase_length(batch.phase, r.prompt_tokens, r.generated_tokens)
            for r in batch.members
        )
        compute = scheduler.profiles.comp_time(
            instance.block_id, self.device, batch.size, batch.phase, length,
            profile.branches,
        )
        if batch.stitch_id:
            compute += scheduler.profiles.comp_time(
                batch.stitch_id, self.device, batch.size, batch.phase, length
            )
        if stage.recompute_pages:
            rate = recompute_rate(scheduler.profiles, instance.block_id,
                                  self.device)
            compute += ceil_us(stage.recompute_pages / rate)
            scheduler.metrics.count(now, 'kv_recompute_pages',
                                    stage.recompute_pages)

        speculate = scheduler.wants_speculation(instance, batch)
        if speculate or self.device.is_busy:
            compute = round_half_up_us(compute * scheduler.config.alpha)
        self.stage = None
        end = now + compute
        self.current = Running(instance=instance, batch=batch, start=now,
                               end=end, activation_key=key)
        instance.running_until = end
        self.current.handle = self.sim.at(
            end, EventKind.BATCH_FINISH, {'device': self.device.id}
        )
        if speculate:
            scheduler.start_surrogate(self, instance, batch, compute)

    def _close(self, running):
        ledger = self.device.ledger
        ledger.release(MemoryCategory.ACTIVATIONS, running.activation_key)
        self.scheduler.metrics.device_busy(self.device.id, running.start,
                                           self.sim.now)
        running.instance.running = None
        running.instance.running_until = 0
        running.instance.last_used = self.sim.now
        self.current = None

    def on_batch_finish(self, event):
        running = self.current
        if running is None:
            return
        self._close(running)
        for request in running.batch.live_members():
            self.scheduler.metrics.interval(
                request.id, StepCategory.COMPUTE, running.start, self.sim.now
            )
        on_batch_complete(self.scheduler, running.instance, running.batch)
        self.kick()

    def abort_if_stale(self):
        """Interrompe o lote em execução quando todos os membros ficaram
        obsoletos (rollback de especulação)."""
        running = self.current
        if running is None or running.batch.live_members():
            return False
        self.sim.cancel(running.handle)
        self._close(running)
        self.kick()
        return True


# ============================================================================
# CONCLUSÃO E ENCAMINHAMENTO
# ============================================================================


def on_batch_complete(scheduler, instance, batch):
    """
    Retira as requisições que atingiram EOS e encaminha as demais ao
    próximo passo da cadeia.

    Returns:
        list[Request]: requisições encaminhadas
    """
    now = scheduler.sim.now
    live = batch.live_members()
    if batch.speculated:
        scheduler.verify_speculation(instance, batch, live)
        return []

    profile = scheduler.profiles.profile(instance.block_id)
    continuing = []
    for request in live:
        step = batch.steps[request.id]
        depart(scheduler, instance, request, step, profile)
        if request.chain.is_last(step):
            if scheduler.emit_token(request):
                continuing.append(request)
        else:
            request.step = step + 1
            continuing.append(request)
    forward(scheduler, continuing, instance)
    return continuing


def depart(scheduler, instance, request, step, profile):
    """Registra a saída da requisição da instância (interceptação)."""
    now = scheduler.sim.now
    logical = request.chain.block_at(step)
    scheduler.interception.begin(request.id, logical, now)
    mean = scheduler.interception.mean(request.id) or 0
    instance.countdown[request.id] = now + int(round(mean))
    request.location = instance.device_id
    request.payload_bytes_per_token = profile.activation_bytes_per_token
    request.state = RequestState.INTERCEPTED


def forward(scheduler, requests, source=None):
    """
    Agrupa as requisições por (próximo bloco, dono do KV, fase) e envia
    cada grupo ao escalonador em lotes no limite do bloco.
    """
    now = scheduler.sim.now
    groups = {}
    for request in requests:
        block_id = request.chain.block_at(request.step)
        owner = ''
        if request.phase == Phase.DECODE:
            owner = request.kv_owner.get(block_id) or ''
        groups.setdefault((block_id, owner, str(request.phase)), []).append(
            request
        )
    batches = []
    for (block_id, owner, phase) in sorted(groups):
        members = groups[(block_id, owner, phase)]
        limit = scheduler.batch_limit(block_id)
        for start in range(0, len(members), limit):
            part = members[start:start + limit]
            batch = Batch(
                id=scheduler.sim.next_batch_id(),
                block_id=block_id,
                phase=phase,
                members=part,
                formed_at=now,
                epochs={r.id: r.epoch for r in part},
                steps={r.id: r.step for r in part},
                kv_owner=owner or None,
            )
            scheduler.submit(batch, source)
            batches.append(batch)
    return batches
