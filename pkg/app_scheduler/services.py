"""
Controle global do serviço por blocos.

Despacho pela estimativa de quatro fatores (fila, computação,
transferência e carga), serviço adaptativo por blocos equivalentes,
escala por limiar de fila, especulação nos gargalos e posicionamento por
localidade (com o baseline de mínima fragmentação).
"""
import itertools
import json
import logging
import math
from collections import Counter

from app_agents.models import (BlockInstance, ChainOfBlocks, Request,
                               RequestState)
from app_agents.services import (TOKEN_BYTES, DeviceAgent, backoff_us,
                                 depart, enqueue, forward)
from app_cluster.models import MemoryCategory, Phase
from app_cluster.services import (NetworkModel, path_bandwidth, phase_length,
                                  swap_time)
from app_engine.models import EventKind
from app_engine.services import Simulation
from app_kv.models import KvPolicy
from app_kv.services import (InterceptionTracker, KvPool, copy_rate,
                             pages_for, plan_migration, policy_rates,
                             reclaim_duplicates, recompute_rate,
                             should_migrate_proactively)
from app_metrics.services import MetricsCollector
from app_scheduler.models import (IDEAL_SPEEDUP, REFERENCE_ACCEPT_THRESHOLD,
                                  LatencyEstimate, LocalityCounter,
                                  Migration, Placement, PlacementMode,
                                  SchedulerConfig, ServingMode,
                                  SpeculationMode, SpeculationPlan)
from utils.app_kv.exceptions import MigrationRefusedError
from utils.app_scheduler.exceptions import InvalidSpeculationPlanError
from utils.commons.units import ceil_us, transfer_us

logger = logging.getLogger(__name__)

# entradas de custo memorizadas antes de esvaziar o cache
COMPUTE_CACHE_SIZE = 200_000


# ============================================================================
# ESTIMATIVA DE LATÊNCIA
# ============================================================================


def load_term(swap_us, transfer, resident, device_busy):
    """
    T_load: zero com o bloco residente; num dispositivo ocioso a carga
    corre junto com a transferência; num ocupado ela vem depois.
    """
    if resident:
        return 0
    if device_busy:
        return swap_us
    return max(swap_us - transfer, 0)


def combine_latency(queue_us, compute_us, transfer, swap_us, resident,
                    device_busy, block_id, device_id, instance_id=None,
                    stitch_id=None):
    return LatencyEstimate(
        queue_us=int(queue_us),
        compute_us=int(compute_us),
        transfer_us=int(transfer),
        load_us=int(load_term(swap_us, transfer, resident, device_busy)),
        block_id=block_id,
        device_id=device_id,
        instance_id=instance_id,
        stitch_id=stitch_id,
    )


# ============================================================================
# POSICIONAMENTO
# ============================================================================


def _fit_on_server(server_devices, free, sizes):
    """Dispositivos (first-fit) que recebem os blocos num servidor."""
    tentative = dict(free)
    chosen = []
    for block_id, size in sorted(sizes, key=lambda s: (-s[1], s[0])):
        target = next(
            (d for d in server_devices if tentative[d] >= size), None
        )
        if target is None:
            return None
        tentative[target] -= size
        chosen.append((block_id, target))
    return chosen


def place_blocks(mode, counters, blocks, free, servers, existing=None):
    """
    Posiciona blocos em dispositivos.

    Localidade: pares de blocos em ordem decrescente de encaminhamentos;
    cada par vai para um mesmo servidor quando os dois cabem, e um par
    já separado ganha uma réplica do bloco menor junto ao maior. Pares
    inviáveis são pulados. O que sobrar (e o modo frag-min inteiro) segue
    first-fit-decreasing por tamanho.

    Args:
        counters: dict (bloco_a, bloco_b) -> encaminhamentos
        blocks: dict bloco -> bytes de parâmetros
        free: dict dispositivo -> bytes livres
        servers: dict dispositivo -> servidor
        existing: dict bloco -> dispositivos que já o hospedam

    Returns:
        Placement
    """
    free = dict(free)
    existing = existing or {}
    located = {b: list(existing.get(b, [])) for b in blocks}
    placement = Placement()
    by_server = {}
    for device_id in sorted(servers):
        by_server.setdefault(servers[device_id], []).append(device_id)

    def put(block_id, device_id):
        free[device_id] -= blocks[block_id]
        located[block_id].append(device_id)
        placement.assignments.append((block_id, device_id))

    if str(mode) == PlacementMode.LOCALITY:
        ranked = sorted(counters.items(), key=lambda kv: (-kv[1], kv[0]))
        for (a, b), count in ranked:
            if a not in blocks or b not in blocks or count <= 0:
                continue
            servers_a = {servers[d] for d in located[a]}
            servers_b = {servers[d] for d in located[b]}
            if servers_a & servers_b:
                continue
            if not servers_a and not servers_b:
                targets = [(s, [(a, blocks[a]), (b, blocks[b])])
                           for s in sorted(by_server)]
            elif servers_a and not servers_b:
                targets = [(s, [(b, blocks[b])]) for s in sorted(servers_a)]
            elif servers_b and not servers_a:
                targets = [(s, [(a, blocks[a])]) for s in sorted(servers_b)]
            else:
                small, large = sorted((a, b), key=lambda x: (blocks[x], x))
                large_servers = servers_a if large == a else servers_b
                targets = [(s, [(small, blocks[small])])
                           for s in sorted(large_servers)]
            for server_id, sizes in targets:
                fitted = _fit_on_server(by_server[server_id], free, sizes)
                if fitted is not None:
                    for block_id, device_id in fitted:
                        put(block_id, device_id)
                    break
            else:
                placement.skipped.append((a, b))

    for block_id in sorted(blocks, key=lambda b: (-blocks[b], b)):
        if located[block_id]:
            continue
        target = next(
            (d for d in sorted(free) if free[d] >= blocks[block_id]), None
        )
        if target is None:
            placement.skipped.append((block_id,))
            continue
        put(block_id, target)
    return placement


def expected_counters(chains, arrivals):
    """Tráfego previsto entre blocos vizinhos: uma passada por token."""
    counters = {}
    for arrival in arrivals:
        chain = chains.get(arrival.app_id)
        if not chain:
            continue
        for a, b in zip(chain, chain[1:]):
            pair = tuple(sorted((a, b)))
            counters[pair] = counters.get(pair, 0) + arrival.output_tokens
    return counters


# ============================================================================
# ESPECULAÇÃO
# ============================================================================


def chain_neighbours(chains):
    neighbours, finals = {}, set()
    for chain in chains:
        if not chain:
            continue
        finals.add(chain[-1])
        for a, b in zip(chain, chain[1:]):
            neighbours.setdefault(a, set()).add(b)
            neighbours.setdefault(b, set()).add(a)
    return neighbours, finals


def select_speculation(ranked, quota, chains, eligible=None):
    """
    Escolhe até `quota` instâncias entre as mais lentas, pulando blocos
    finais de alguma cadeia e blocos vizinhos de um já escolhido.

    Args:
        ranked: [(instance_id, block_id)] do maior para o menor tempo de
            esvaziamento da fila
        eligible: predicado sobre block_id (substituto disponível)
    """
    neighbours, finals = chain_neighbours(chains)
    selected, blocks = [], set()
    for instance_id, block_id in ranked:
        if len(selected) >= quota:
            break
        if eligible is not None and not eligible(block_id):
            continue
        if block_id in finals:
            continue
        if neighbours.get(block_id, set()) & blocks:
            continue
        selected.append(instance_id)
        blocks.add(block_id)
    return selected


def validate_plan(plan, instance_blocks, chains, quota):
    """
    Raises:
        InvalidSpeculationPlanError: plano acima da cota, com passo final
            ou com passos adjacentes
    """
    if len(plan.instance_ids) > quota:
        raise InvalidSpeculationPlanError('acima da cota', plan.instance_ids)
    neighbours, finals = chain_neighbours(chains)
    blocks = {instance_blocks[i] for i in plan.instance_ids}
    if blocks & finals:
        raise InvalidSpeculationPlanError('passo final', plan.instance_ids)
    for block_id in blocks:
        if neighbours.get(block_id, set()) & blocks:
            raise InvalidSpeculationPlanError('passos adjacentes',
                                              plan.instance_ids)
    return True


def surrogate_similarity(acceptance, draw):
    """
    Similaridade de cosseno entre a saída do substituto e a verdadeira.

    A deficiência 1 - s é uniforme em [0, (1 - ref) / acceptance], de modo
    que P(s >= ref) = acceptance no limiar de referência em que o perfil
    foi medido; limiares mais exigentes aceitam menos.
    """
    if acceptance <= 0:
        return -1.0
    return 1.0 - (1.0 - REFERENCE_ACCEPT_THRESHOLD) * draw / acceptance


def speculation_harness(chain_costs, speculated=(), speedups=10, wrong_at=()):
    """
    Reproduz uma cadeia isolada no motor de eventos com especulação.

    O passo i especulado libera o seguinte após ceil(T_i / aceleração); a
    verificação termina em T_i. Uma previsão errada descarta o trabalho a
    jusante e o refaz a partir da verificação. A saída final só é emitida
    quando todas as verificações terminam.

    No passo final o substituto entrega a própria saída da passada, que
    não pode ser corrigida depois de entregue; por isso a passada também
    corre sem especulação numa segunda trilha, e uma previsão final
    errada fica com o resultado dessa trilha.

    Returns:
        dict: baseline_us, ideal_us (todas as previsões sem espera),
            bound_us (tudo certo), completion_us, reduction_us
    """
    costs = [int(c) for c in chain_costs]
    n = len(costs)
    speculated = set(speculated)
    wrong_at = set(wrong_at)
    last = n - 1

    def speedup(i):
        if isinstance(speedups, dict):
            return speedups.get(i, 10)
        if isinstance(speedups, (list, tuple)):
            return speedups[i]
        return speedups

    def replay(wrong):
        sim = Simulation(record_log=False)
        generation = [0] * n
        ends = {}
        fallback = {}

        def start(i):
            now = sim.now
            sim.at(now + costs[i], EventKind.BATCH_FINISH,
                   ('spec', i, generation[i]))
            if i in speculated:
                sim.at(now + ceil_us(costs[i] / speedup(i)),
                       EventKind.SURROGATE_FORWARD, (i, generation[i]))

        def on_surrogate(event):
            i, gen = event.payload
            if gen == generation[i] and i < last:
                start(i + 1)

        def on_finish(event):
            lane, i, gen = event.payload
            if lane == 'fallback':
                fallback[i] = sim.now
                if i < last:
                    sim.after(costs[i + 1], EventKind.BATCH_FINISH,
                              ('fallback', i + 1, 0))
                return
            if gen != generation[i]:
                return
            ends[i] = sim.now
            if i == last:
                return
            if i in speculated:
                if i in wrong:
                    for j in range(i + 1, n):
                        generation[j] += 1
                        ends.pop(j, None)
                    start(i + 1)
            else:
                start(i + 1)

        sim.on(EventKind.BATCH_FINISH, on_finish)
        sim.on(EventKind.SURROGATE_FORWARD, on_surrogate)
        start(0)
        if last in speculated:
            sim.at(costs[0], EventKind.BATCH_FINISH, ('fallback', 0, 0))
        sim.run()
        if last in speculated and last in wrong:
            return fallback[last]
        return max(ends.values())

    baseline = sum(costs)
    ideal = sum(
        ceil_us(c / speedup(i)) if i in speculated else c
        for i, c in enumerate(costs)
    )
    bound = replay(set())
    completion = replay(wrong_at)
    return {
        'baseline_us': baseline,
        'ideal_us': ideal,
        'bound_us': bound,
        'completion_us': completion,
        'reduction_us': baseline - completion,
    }


# ============================================================================
# ESCALONADOR
# ============================================================================


class Scheduler:
    """
    Controlador global dentro do laço de eventos. Mantém as instâncias de
    bloco, os agentes por dispositivo, os pools de KV e as revisões
    periódicas.
    """

    def __init__(self, sim, cluster, catalog, profiles, config=None,
                 metrics=None):
        self.sim = sim
        self.cluster = cluster
        self.catalog = catalog
        self.profiles = profiles
        self.config = config or SchedulerConfig()
        self.metrics = metrics or MetricsCollector(
            tick_us=self.config.metrics_tick_us
        )
        self.network = NetworkModel(sim, cluster)
        self.pools = {
            d: KvPool(cluster.device(d)) for d in cluster.device_ids
        }
        self.agents = {
            d: DeviceAgent(self, cluster.device(d))
            for d in cluster.device_ids
        }
        self.instances = {}
        self.requests = {}
        self.kv_home = {}
        self.migrations = {}
        self.interception = InterceptionTracker()
        self.locality = LocalityCounter(self.config.review_period_us)
        self.plan = SpeculationPlan()
        self.expected_arrivals = 0
        self._instance_seq = itertools.count()
        # aplicações cujas cadeias passam por cada bloco
        self.sharers = Counter(
            block_id for chain in catalog.chains.values()
            for block_id in set(chain)
        )
        self._compute_cache = {}

        sim.on(EventKind.REQUEST_ARRIVAL, self._on_arrival)
        sim.on(EventKind.BATCH_FINISH, self._route('on_batch_finish'))
        sim.on(EventKind.LOAD_COMPLETE, self._route('on_load_complete'))
        sim.on(EventKind.SURROGATE_FORWARD, self._on_surrogate_forward)
        sim.on(EventKind.MIGRATION_STEP, self._on_migration_step)
        sim.on(EventKind.RETRY, self._on_retry)
        sim.on(EventKind.DEFERRED_EMIT, self._on_deferred_emit)
        sim.on(EventKind.SCALE_CHECK, self._on_scale_check)
        sim.on(EventKind.KV_REVIEW, self._on_kv_review)
        sim.on(EventKind.PLACEMENT_REVIEW, self._on_placement_review)
        sim.on(EventKind.METRICS_TICK, self._on_metrics_tick)

    def _route(self, method):
        def handler(event):
            getattr(self.agents[event.payload['device']], method)(event)
        return handler

    def log_decision(self, action, **fields):
        record = {'t': self.sim.now, 'action': action}
        record.update(fields)
        self.metrics.decision(self.sim.now,
                              json.dumps(record, sort_keys=True, default=str))

    # ------------------------------------------------------------------
    # Instâncias e memória
    # ------------------------------------------------------------------

    def instances_of(self, block_id):
        return sorted(
            (i for i in self.instances.values() if i.block_id == block_id),
            key=lambda i: i.id,
        )

    def batch_limit(self, block_id):
        """
        Lote máximo de um bloco. No modo por blocos, o bloco compartilhado
        por várias aplicações junta as requisições delas: max_batch por
        aplicação, até max_shared_batch.
        """
        base = self.config.max_batch
        if str(self.catalog.mode) != ServingMode.BLOCK:
            return base
        shared = base * max(1, self.sharers.get(block_id, 0))
        return max(base, min(shared, self.config.max_shared_batch))

    def create_instance(self, block_id, device_id, resident=False):
        instance = BlockInstance(
            id=f"{block_id}@{device_id}#{next(self._instance_seq)}",
            block_id=block_id,
            device_id=device_id,
            max_batch=self.batch_limit(block_id),
            created_at=self.sim.now,
            last_used=self.sim.now,
        )
        if resident:
            profile = self.profiles.profile(block_id)
            self.cluster.device(device_id).ledger.allocate(
                MemoryCategory.PARAMS, instance.id, profile.param_bytes
            )
            instance.resident = True
        self.instances[instance.id] = instance
        self.agents[device_id].attach(instance)
        return instance

    def remove_instance(self, instance):
        device = self.cluster.device(instance.device_id)
        device.ledger.release(MemoryCategory.PARAMS, instance.id)
        self.instances.pop(instance.id, None)
        self.agents[instance.device_id].detach(instance)
        self.plan.bindings.pop(instance.id, None)

    def evict_plan(self, device, nbytes, keep=None):
        """
        Instâncias ociosas e residentes a despejar (menos usadas primeiro)
        para liberar `nbytes`; None se nem despejando tudo cabe.
        """
        free = device.ledger.free
        if nbytes <= free:
            return []
        candidates = sorted(
            (i for i in self.agents[device.id].instances.values()
             if i is not keep and i.idle and i.resident),
            key=lambda i: (i.last_used, i.id),
        )
        chosen = []
        for instance in candidates:
            chosen.append(instance)
            free += device.ledger.get(MemoryCategory.PARAMS, instance.id)
            if free >= nbytes:
                return chosen
        return None

    def make_room(self, device, nbytes, keep=None):
        """
        Despeja instâncias ociosas até caber `nbytes`.

        Returns:
            list[CostProfile] | None: perfis despejados, ou None
        """
        chosen = self.evict_plan(device, nbytes, keep)
        if chosen is None:
            return None
        evicted = []
        for instance in chosen:
            evicted.append(self.profiles.profile(instance.block_id))
            self.remove_instance(instance)
            self.log_decision('evict', instance=instance.id,
                              device=device.id)
        return evicted

    def kv_growth_bytes(self, members, instance=None, block_id=None,
                        device_id=None):
        """Bytes de KV a alocar para levar cada membro ao contexto atual."""
        if instance is not None:
            block_id, device_id = instance.block_id, instance.device_id
        profile = self.profiles.profile(block_id)
        if not profile.kv_bytes_per_token:
            return 0
        pool = self.pools[device_id]
        page_bytes = pool.page_bytes(profile.kv_bytes_per_token)
        total = 0
        for request in members:
            have = 0
            if pool.has_segment(request.id, block_id):
                have = len(pool.segment(request.id, block_id).pages)
            needed = pages_for(request.context_tokens, pool.tokens_per_page)
            total += max(0, needed - have) * page_bytes
        return total

    def batch_bytes(self, members, block_id, device_id):
        """KV novo mais ativações do lote."""
        profile = self.profiles.profile(block_id)
        return self.kv_growth_bytes(
            members, block_id=block_id, device_id=device_id
        ) + sum(r.pass_tokens * profile.activation_bytes_per_token
                for r in members)

    def note_kv(self, request, step, instance):
        logical = request.chain.block_at(step)
        request.kv_owner[logical] = instance.id
        if self.profiles.profile(instance.block_id).kv_bytes_per_token:
            self.kv_home[(request.id, instance.block_id)] = \
                instance.device_id

    # ------------------------------------------------------------------
    # Migração de KV
    # ------------------------------------------------------------------

    def migration_rates(self, block_id, src, dst, bytes_per_token):
        device = self.cluster.device(dst)
        r_rec = recompute_rate(self.profiles, block_id, device)
        page_bytes = self.pools[src].page_bytes(bytes_per_token)
        r_cp = copy_rate(path_bandwidth(self.cluster, src, dst), page_bytes)
        return policy_rates(self.config.kv_policy, r_rec, r_cp)

    def start_migration(self, request, block_id, src, dst, proactive=False):
        """
        Recomputação da cabeça no destino em paralelo com a cópia da cauda
        pela rede; o segmento de origem é liberado ao final.

        Returns:
            Migration | None: None quando o plano é recusado
        """
        key = (request.id, block_id)
        src_pool, dst_pool = self.pools[src], self.pools[dst]
        segment = src_pool.segment(*key)
        r_rec, r_cp = self.migration_rates(block_id, src, dst,
                                           segment.bytes_per_token)
        if dst_pool.has_segment(*key):
            dst_pool.release(*key)
        try:
            plan = plan_migration(segment, dst, r_rec, r_cp, dst_pool)
        except MigrationRefusedError as exc:
            logger.debug("%s", exc.message)
            return None
        dst_pool.adopt(segment)
        migration = Migration(
            request_id=request.id, block_id=block_id, src=src, dst=dst,
            plan=plan, started=self.sim.now, proactive=proactive,
        )
        self.migrations[key] = migration
        if plan.recomputed_pages:
            migration.pending += 1
            self.cluster.device(dst).co_running += 1
            self.sim.after(ceil_us(plan.recompute_us),
                           EventKind.MIGRATION_STEP,
                           {'migration': migration, 'part': 'recompute'})
        if plan.copied_pages:
            migration.pending += 1
            self.network.start(
                src, dst, plan.copied_bytes, tag='kv',
                on_done=lambda job: self._migration_part(migration),
            )
        if not migration.pending:
            migration.pending = 1
            self.sim.after(0, EventKind.MIGRATION_STEP,
                           {'migration': migration, 'part': 'empty'})
        self.metrics.count(self.sim.now, 'migrations')
        if proactive:
            self.metrics.count(self.sim.now, 'proactive_migrations')
        return migration

    def _on_migration_step(self, event):
        migration = event.payload['migration']
        if event.payload['part'] == 'recompute':
            device = self.cluster.device(migration.dst)
            device.co_running -= 1
            self.metrics.device_busy(device.id, migration.started,
                                     self.sim.now)
        self._migration_part(migration)

    def _migration_part(self, migration):
        migration.pending -= 1
        if migration.pending > 0:
            return
        key = migration.key
        self.migrations.pop(key, None)
        self.pools[migration.src].release(*key)
        request = self.requests.get(migration.request_id)
        if request is None or request.done:
            self.pools[migration.dst].release(*key)
        else:
            self.kv_home[key] = migration.dst
        plan = migration.plan
        self.metrics.count(self.sim.now, 'kv_copy_bytes', plan.copied_bytes)
        self.metrics.count(self.sim.now, 'kv_recompute_pages',
                           plan.recomputed_pages)
        for callback in migration.callbacks:
            callback(migration)

    def ensure_kv(self, request, instance, stage, callback):
        """
        Garante o KV de um membro no dispositivo do lote: presente, em
        migração para cá, migrado de onde está ou recomputado por inteiro.
        """
        block_id = instance.block_id
        if not self.profiles.profile(block_id).kv_bytes_per_token:
            return
        key = (request.id, block_id)
        dst = instance.device_id
        migration = self.migrations.get(key)
        if migration is not None and migration.dst == dst:
            stage.pending += 1
            migration.callbacks.append(lambda m: callback(stage, m))
            return
        home = self.kv_home.get(key)
        if migration is None:
            if home is not None and home != dst and \
                    self.pools[home].has_segment(*key):
                migration = self.start_migration(request, block_id, home,
                                                 dst)
                if migration is not None:
                    stage.pending += 1
                    migration.callbacks.append(
                        lambda m: callback(stage, m)
                    )
                    return
            elif self.pools[dst].has_segment(*key):
                return
        stage.recompute_pages += pages_for(
            max(request.context_tokens - 1, 0),
            self.pools[dst].tokens_per_page,
        )

    # ------------------------------------------------------------------
    # Estimativa e despacho
    # ------------------------------------------------------------------

    def batch_compute(self, block_id, device, batch, stitch_id=None):
        length = max(
            (phase_length(batch.phase, r.prompt_tokens, r.generated_tokens)
             for r in batch.members),
            default=1,
        )
        key = (block_id, device.device_class, batch.size, str(batch.phase),
               length, stitch_id)
        value = self._compute_cache.get(key)
        if value is not None:
            return value
        profile = self.profiles.profile(block_id)
        value = self.profiles.comp_time(block_id, device, batch.size,
                                        batch.phase, length, profile.branches)
        if stitch_id:
            value += self.profiles.comp_time(stitch_id, device, batch.size,
                                             batch.phase, length)
        if len(self._compute_cache) >= COMPUTE_CACHE_SIZE:
            self._compute_cache.clear()
        self._compute_cache[key] = value
        return value

    def queue_us(self, instance):
        """Tempo para esvaziar a fila: lote em curso mais os enfileirados."""
        device = self.cluster.device(instance.device_id)
        now = self.sim.now
        total = 0
        if instance.running is not None:
            if instance.running_until > now:
                total += instance.running_until - now
            else:
                total += self.batch_compute(instance.block_id, device,
                                            instance.running,
                                            instance.running.stitch_id)
        for batch in instance.queue:
            total += self.batch_compute(instance.block_id, device, batch,
                                        batch.stitch_id)
        return total

    def transfer_term(self, members, device_id):
        by_source = {}
        for request in members:
            by_source[request.location] = by_source.get(
                request.location, 0
            ) + request.payload_bytes_per_token * request.pass_tokens
        return max(
            (transfer_us(nbytes, path_bandwidth(self.cluster, src, device_id))
             for src, nbytes in sorted(by_source.items())),
            default=0,
        )

    def kv_term(self, members, block_id, device_id, phase):
        profile = self.profiles.profile(block_id)
        if str(phase) != Phase.DECODE or not profile.kv_bytes_per_token:
            return 0
        pool = self.pools[device_id]
        device = self.cluster.device(device_id)
        worst = 0
        for request in members:
            key = (request.id, block_id)
            migration = self.migrations.get(key)
            if migration is not None and migration.dst == device_id:
                remaining = migration.started + \
                    migration.plan.completion_us - self.sim.now
                worst = max(worst, remaining)
                continue
            home = self.kv_home.get(key)
            if migration is None and home in (None, device_id) and \
                    pool.has_segment(*key):
                continue
            pages = pages_for(max(request.context_tokens - 1, 0),
                              pool.tokens_per_page)
            if migration is None and home is not None and \
                    home != device_id and \
                    self.pools[home].has_segment(*key):
                segment = self.pools[home].segment(*key)
                r_rec, r_cp = self.migration_rates(
                    block_id, home, device_id, segment.bytes_per_token
                )
                try:
                    plan = plan_migration(segment, device_id, r_rec, r_cp)
                    worst = max(worst, plan.completion_us)
                    continue
                except MigrationRefusedError:
                    pass
            rate = recompute_rate(self.profiles, block_id, device)
            worst = max(worst, ceil_us(pages / rate))
        return worst

    def estimate_latency(self, batch, instance=None, block_id=None,
                         device_id=None, stitch_id=None):
        """
        T_queue + T_compute + T_transfer + T_load para uma instância
        existente ou para uma nova instância de `block_id` em `device_id`.

        Returns:
            LatencyEstimate | None: None quando o dispositivo não comporta
            o bloco mais os dados das requisições
        """
        if instance is not None:
            block_id, device_id = instance.block_id, instance.device_id
        device = self.cluster.device(device_id)
        profile = self.profiles.profile(block_id)
        members = batch.members

        needed = self.batch_bytes(members, block_id, device_id)
        resident = instance is not None and \
            (instance.resident or instance.loading)
        if not resident:
            needed += profile.param_bytes
        evicted = self.evict_plan(device, needed, keep=instance)
        if evicted is None:
            return None

        transfer = self.transfer_term(members, device_id) + \
            self.kv_term(members, block_id, device_id, batch.phase)
        swap = 0
        if not resident:
            swap = swap_time(
                profile.param_bytes,
                [self.profiles.profile(e.block_id).param_bytes
                 for e in evicted],
                device,
            )
        return combine_latency(
            queue_us=self.queue_us(instance) if instance else 0,
            compute_us=self.batch_compute(block_id, device, batch, stitch_id),
            transfer=transfer,
            swap_us=swap,
            resident=resident,
            device_busy=device.is_busy or self.agents[device_id].working,
            block_id=block_id,
            device_id=device_id,
            instance_id=instance.id if instance else None,
            stitch_id=stitch_id,
        )

    def new_instance_sites(self, batch, hosting, loads):
        """
        Dispositivos avaliados para uma nova instância, em ordem de
        tentativa: os que já guardam as ativações dos membros e, em cada
        servidor, os demais do menos carregado ao mais carregado.

        Returns:
            list[list[str]]: grupos; de cada grupo vale o primeiro viável
        """
        near = sorted({r.location for r in batch.members
                       if r.location in self.agents and
                       r.location not in hosting})
        groups = [[d] for d in near]
        by_server = {}
        for device_id in self.cluster.device_ids:
            if device_id in hosting or device_id in near:
                continue
            by_server.setdefault(self.cluster.server_of(device_id),
                                 []).append(device_id)
        for server_id in sorted(by_server):
            groups.append(sorted(by_server[server_id],
                                 key=lambda d: (loads[d], d)))
        return groups

    def options(self, batch):
        """
        Estimativas das instâncias candidatas: todas as existentes e uma
        nova por servidor (a do dispositivo menos carregado que comporta).
        """
        estimates = []
        candidates = self.catalog.candidate_instances(
            batch.block_id, adaptive=self.config.adaptive
        )
        loads = None
        for block_id, stitch_id in candidates:
            if block_id not in self.profiles or \
                    (stitch_id and stitch_id not in self.profiles):
                continue
            existing = self.instances_of(block_id)
            for instance in existing:
                estimate = self.estimate_latency(batch, instance,
                                                 stitch_id=stitch_id)
                if estimate is not None:
                    estimates.append(estimate)
            if loads is None:
                loads = {d: self.device_load(d)
                         for d in self.cluster.device_ids}
            hosting = {i.device_id for i in existing}
            for group in self.new_instance_sites(batch, hosting, loads):
                for device_id in group:
                    estimate = self.estimate_latency(
                        batch, block_id=block_id, device_id=device_id,
                        stitch_id=stitch_id,
                    )
                    if estimate is not None:
                        estimates.append(estimate)
                        break
        return estimates

    def kv_owner_choice(self, batch):
        """
        Instância dona do KV do lote, se existir e o dispositivo comportar
        o lote. Ignorada na política least-busy.
        """
        if str(self.config.kv_policy) == KvPolicy.LEAST_BUSY or \
                str(batch.phase) != Phase.DECODE or not batch.kv_owner:
            return None
        owner = self.instances.get(batch.kv_owner)
        if owner is None:
            return None
        needed = self.batch_bytes(batch.members, owner.block_id,
                                  owner.device_id)
        device = self.cluster.device(owner.device_id)
        if self.evict_plan(device, needed, keep=owner) is None:
            return None
        threshold = self.config.downgrade_queue_us
        if threshold is not None and self.queue_us(owner) > threshold:
            return None
        return owner

    def dispatch(self, batch, source=None):
        """
        Escolhe a instância do lote: a dona do KV quando viável; senão o
        menor total entre as candidatas, inclusive instanciar o bloco num
        dispositivo disponível.

        Returns:
            BlockInstance | None: None quando nada é viável
        """
        chosen = self.kv_owner_choice(batch)
        if chosen is None:
            estimates = self.options(batch)
            if not estimates:
                return None
            best = min(estimates, key=LatencyEstimate.sort_key)
            batch.stitch_id = best.stitch_id
            if best.is_new:
                chosen = self.create_instance(best.block_id, best.device_id)
                self.log_decision(
                    'instantiate', block=best.block_id,
                    device=best.device_id, instance=chosen.id,
                    total_us=best.total,
                )
            else:
                chosen = self.instances[best.instance_id]
        else:
            batch.stitch_id = None

        if chosen.block_id != batch.block_id:
            now = self.sim.now
            for request in batch.members:
                if not request.adaptive:
                    request.adaptive = True
                    self.metrics.flag(now, request.id, 'adaptive')
            self.metrics.count(now, 'adaptive', batch.size)
            self.log_decision('adaptive', block=batch.block_id,
                              served=chosen.block_id, stitch=batch.stitch_id,
                              requests=batch.member_ids)
        return chosen

    def submit(self, batch, source=None):
        """Despacha e entrega o lote; estaciona com recuo se inviável."""
        batch.members = batch.live_members()
        if not batch.members:
            return None
        instance = self.dispatch(batch, source)
        if instance is None:
            self.metrics.count(self.sim.now, 'retries')
            self.sim.after(backoff_us(batch.attempt), EventKind.RETRY,
                           {'batch': batch, 'source': source})
            batch.attempt += 1
            return None
        self.deliver(batch, instance, source)
        return instance

    def deliver(self, batch, instance, source=None):
        now = self.sim.now
        pool = self.pools[instance.device_id]
        returning = False
        for request in batch.members:
            logical = request.chain.block_at(batch.steps[request.id])
            request.step_started = now
            request.state = RequestState.QUEUED
            self.interception.end(request.id, logical, now)
            if instance.countdown.pop(request.id, None) is not None and \
                    pool.has_segment(request.id, instance.block_id):
                returning = True
        batch.priority = returning and str(batch.phase) == Phase.DECODE

        if source is not None:
            self.metrics.count(now, 'forwardings', batch.size)
            if self.cluster.server_of(source.device_id) != \
                    self.cluster.server_of(instance.device_id):
                self.metrics.count(now, 'inter_server_forwardings',
                                   batch.size)
            self.locality.record(source.block_id, instance.block_id, now,
                                 batch.size)
        enqueue(instance, batch)
        self.agents[instance.device_id].kick()

    # ------------------------------------------------------------------
    # Chegadas e emissão de tokens
    # ------------------------------------------------------------------

    def load(self, arrivals):
        for arrival in arrivals:
            self.sim.at(arrival.arrival_us, EventKind.REQUEST_ARRIVAL,
                        arrival)
        self.expected_arrivals += len(arrivals)

    def _on_arrival(self, event):
        arrival = event.payload
        request = Request(
            id=arrival.request_id,
            app_id=arrival.app_id,
            arrival=self.sim.now,
            prompt_tokens=arrival.prompt_tokens,
            target_output_tokens=arrival.output_tokens,
            chain=self.chain_for(arrival.app_id),
            prefix_tokens=arrival.prefix_tokens,
            payload_bytes_per_token=TOKEN_BYTES,
        )
        self.requests[request.id] = request
        self.metrics.arrival(self.sim.now, request.id, request.app_id)
        forward(self, [request])

    def chain_for(self, app_id):
        return ChainOfBlocks.from_blocks(app_id,
                                         self.catalog.chain_for(app_id))

    def emit_token(self, request):
        """
        Emite o token da passada; adia a emissão até a última verificação
        especulativa pendente.

        Returns:
            bool: True quando a requisição começa nova passada
        """
        if request.verify_until > self.sim.now:
            self.sim.at(request.verify_until, EventKind.DEFERRED_EMIT,
                        {'request': request, 'epoch': request.epoch})
            return False
        return self._emit(request)

    def _emit(self, request):
        now = self.sim.now
        request.generated_tokens += 1
        request.verifications.clear()
        self.metrics.tokens(now, request.id, 1)
        if request.done:
            self.complete(request)
            return False
        request.step = 0
        request.spec_step = -2
        request.payload_bytes_per_token = TOKEN_BYTES
        return True

    def _on_deferred_emit(self, event):
        request = event.payload['request']
        if request.done or request.epoch != event.payload['epoch']:
            return
        if request.verify_until > self.sim.now:
            self.sim.at(request.verify_until, EventKind.DEFERRED_EMIT,
                        event.payload)
            return
        if self._emit(request):
            forward(self, [request])

    def complete(self, request):
        now = self.sim.now
        request.state = RequestState.DONE
        request.completion = now
        self.metrics.completion(now, request.id)
        for pool in self.pools.values():
            pool.release_request(request.id)
        for key in [k for k in self.kv_home if k[0] == request.id]:
            del self.kv_home[key]
        self.interception.forget(request.id)
        for instance in self.instances.values():
            instance.countdown.pop(request.id, None)

    def _on_retry(self, event):
        payload = event.payload
        if 'device' in payload:
            self.agents[payload['device']].kick()
            return
        self.submit(payload['batch'], payload['source'])

    # ------------------------------------------------------------------
    # Especulação
    # ------------------------------------------------------------------

    def wants_speculation(self, instance, batch):
        if str(self.config.speculation) == SpeculationMode.OFF or \
                instance.id not in self.plan:
            return False
        for request in batch.members:
            step = batch.steps[request.id]
            if request.chain.is_last(step) or request.spec_step == step - 1:
                return False
        batch.speculated = True
        return True

    def acceptance(self, block_id):
        if str(self.config.speculation) == SpeculationMode.IDEAL:
            return 1.0
        profile = self.profiles.profile(block_id)
        if profile.surrogate_acceptance is not None:
            return profile.surrogate_acceptance
        return self.config.surrogate_acceptance

    def start_surrogate(self, agent, instance, batch, compute):
        """
        Pista concorrente do substituto: libera o passo seguinte em
        T_b / aceleração; a verificação termina com o próprio lote.
        """
        now = self.sim.now
        speedup = self.plan.bindings[instance.id]
        surrogate_us = max(1, ceil_us(compute / speedup))
        agent.device.co_running += 1
        for request in batch.members:
            step = batch.steps[request.id]
            request.verifications[step] = now + compute
            request.spec_step = step
            if not request.speculated:
                request.speculated = True
                self.metrics.flag(now, request.id, 'speculated')
        self.metrics.count(now, 'speculation_attempts')
        self.sim.after(surrogate_us, EventKind.SURROGATE_FORWARD, {
            'device': agent.device.id, 'instance': instance,
            'batch': batch, 'started': now,
        })

    def _on_surrogate_forward(self, event):
        payload = event.payload
        device = self.cluster.device(payload['device'])
        device.co_running -= 1
        self.metrics.device_busy(device.id, payload['started'], self.sim.now)
        instance, batch = payload['instance'], payload['batch']
        profile = self.profiles.profile(instance.block_id)
        live = batch.live_members()
        for request in live:
            step = batch.steps[request.id]
            depart(self, instance, request, step, profile)
            request.step = step + 1
        forward(self, live, instance)

    def verify_speculation(self, instance, batch, live):
        """
        Fim da verificação: sorteia a similaridade da saída do substituto e
        aceita o lote se ela alcança `surrogate_accept_threshold`. Na rejeição
        as requisições mudam de época, o trabalho a jusante é descartado e o
        passo seguinte recomeça com a saída verdadeira.
        """
        now = self.sim.now
        accepted = str(self.config.speculation) == SpeculationMode.IDEAL or \
            surrogate_similarity(
                self.acceptance(instance.block_id),
                self.sim.rng('surrogate-acceptance').random(),
            ) >= self.config.surrogate_accept_threshold
        for request in live:
            request.verifications.pop(batch.steps[request.id], None)
        if accepted:
            self.metrics.count(now, 'speculation_accepts')
            return
        self.metrics.count(now, 'speculation_rejects')
        self.log_decision('speculation_reject', instance=instance.id,
                          requests=[r.id for r in live])
        profile = self.profiles.profile(instance.block_id)
        for request in live:
            step = batch.steps[request.id]
            request.epoch += 1
            for later in [s for s in request.verifications if s > step]:
                del request.verifications[later]
            depart(self, instance, request, step, profile)
            request.step = step + 1
        forward(self, live, instance)
        for device_id in sorted(self.agents):
            self.agents[device_id].abort_if_stale()

    def active_chains(self):
        chains = {
            tuple(s.block_id for s in r.chain.steps)
            for r in self.requests.values() if not r.done
        }
        if not chains:
            chains = {tuple(c) for c in self.catalog.chains.values()}
        return sorted(chains)

    def speculation_quota(self):
        return math.ceil(self.config.speculation_top_k * len(self.instances))

    def plan_speculation(self, now=None):
        """
        Seleciona os gargalos: instâncias ordenadas pelo tempo de
        esvaziamento da fila, até ceil(k·N), sem passos finais nem
        vizinhos.
        """
        ideal = str(self.config.speculation) == SpeculationMode.IDEAL
        ranked = sorted(
            self.instances.values(),
            key=lambda i: (-self.queue_us(i), i.id),
        )

        def eligible(block_id):
            return ideal or self.profiles.profile(block_id).has_surrogate

        selected = select_speculation(
            [(i.id, i.block_id) for i in ranked], self.speculation_quota(),
            self.active_chains(), eligible,
        )
        bindings = {
            instance_id: (
                IDEAL_SPEEDUP if ideal else self.profiles.profile(
                    self.instances[instance_id].block_id
                ).surrogate_speedup
            )
            for instance_id in selected
        }
        self.plan = SpeculationPlan(tuple(selected), bindings,
                                    self.sim.now if now is None else now)
        self.log_decision('speculation_plan', instances=list(selected))
        return self.plan

    # ------------------------------------------------------------------
    # Escala
    # ------------------------------------------------------------------

    def max_queue_length(self, instance):
        """
        Saturação: lotes cheios no comprimento máximo cujo KV e ativações
        cabem na memória não ocupada por parâmetros.
        """
        device = self.cluster.device(instance.device_id)
        profile = self.profiles.profile(instance.block_id)
        footprint = (profile.kv_bytes_per_token +
                     profile.activation_bytes_per_token) * \
            self.config.max_sequence_length
        per_batch = instance.max_batch * footprint
        available = device.ledger.capacity - \
            device.ledger.category_used(MemoryCategory.PARAMS)
        if per_batch <= 0:
            return math.inf
        return max(1, available // per_batch)

    def needs_scaling(self, instance):
        """
        Fila acima de t vezes a saturação, medida em lotes (memória) ou em
        tempo para esvaziá-la (max_queue_delay).
        """
        threshold = self.config.scale_threshold
        if len(instance.queue) > threshold * self.max_queue_length(instance):
            return True
        return bool(instance.queue) and \
            self.queue_us(instance) > threshold * \
            self.config.max_queue_delay_us

    def device_load(self, device_id):
        return sum(self.queue_us(i)
                   for i in self.agents[device_id].instances.values())

    def scale_target(self, instance):
        profile = self.profiles.profile(instance.block_id)
        hosting = {i.device_id for i in self.instances_of(instance.block_id)}
        options = []
        for device_id in self.cluster.device_ids:
            if device_id in hosting:
                continue
            device = self.cluster.device(device_id)
            committed = sum(
                self.profiles.profile(i.block_id).param_bytes
                for i in self.agents[device_id].instances.values()
                if not i.resident and not i.loading
            )
            if self.evict_plan(device, profile.param_bytes + committed) \
                    is None:
                continue
            options.append((self.device_load(device_id), device_id))
        return min(options)[1] if options else None

    def check_scaling(self, now=None):
        """
        Replica as instâncias saturadas (fila acima de t·max_queue em lotes
        ou em tempo), da mais carregada para a menos, movendo metade da
        fila para a réplica.

        Returns:
            list[dict]: ações tomadas ou puladas
        """
        overloaded = sorted(
            (i for i in self.instances.values() if self.needs_scaling(i)),
            key=lambda i: (-len(i.queue), -self.queue_us(i), i.id),
        )
        actions = []
        for instance in overloaded:
            target = self.scale_target(instance)
            if target is None:
                action = {'instance': instance.id, 'scaled': False}
                self.log_decision('scale_skipped', instance=instance.id)
                actions.append(action)
                continue
            replica = self.create_instance(instance.block_id, target)
            moving = len(instance.queue) // 2
            moved = instance.queue[len(instance.queue) - moving:]
            del instance.queue[len(instance.queue) - moving:]
            for batch in moved:
                enqueue(replica, batch)
            self.rebalance_kv(instance, replica, moved)
            self.metrics.count(self.sim.now, 'scale_actions')
            self.log_decision('scale', instance=instance.id,
                              replica=replica.id, moved=moving)
            actions.append({'instance': instance.id, 'scaled': True,
                            'replica': replica.id, 'device': target,
                            'moved': moving})
            self.agents[target].kick()
        return actions

    def rebalance_kv(self, instance, replica, moved):
        """Migração proativa do KV dos lotes movidos quando termina antes
        do uso previsto."""
        profile = self.profiles.profile(instance.block_id)
        if not profile.kv_bytes_per_token:
            return
        predicted = self.queue_us(replica)
        src_pool = self.pools[instance.device_id]
        for batch in moved:
            for request in batch.live_members():
                key = (request.id, instance.block_id)
                if key in self.migrations or not src_pool.has_segment(*key):
                    continue
                segment = src_pool.segment(*key)
                r_rec, r_cp = self.migration_rates(
                    instance.block_id, instance.device_id,
                    replica.device_id, segment.bytes_per_token,
                )
                try:
                    plan = plan_migration(segment, replica.device_id, r_rec,
                                          r_cp, self.pools[replica.device_id])
                except MigrationRefusedError:
                    continue
                if should_migrate_proactively(plan, predicted):
                    self.start_migration(request, instance.block_id,
                                         instance.device_id,
                                         replica.device_id, proactive=True)

    # ------------------------------------------------------------------
    # Posicionamento
    # ------------------------------------------------------------------

    def placement_inputs(self, reserve=0.0):
        free = {}
        for device_id in self.cluster.device_ids:
            ledger = self.cluster.device(device_id).ledger
            free[device_id] = int(ledger.capacity * (1 - reserve)) - \
                ledger.used
        servers = {d: self.cluster.server_of(d)
                   for d in self.cluster.device_ids}
        return free, servers

    def served_blocks(self):
        blocks = {}
        for chain in self.catalog.chains.values():
            for block_id in chain:
                blocks[block_id] = self.profiles.profile(block_id).param_bytes
        return blocks

    def provision(self, arrivals=()):
        """Posicionamento inicial: instâncias já carregadas em t=0."""
        free, servers = self.placement_inputs(self.config.placement_reserve)
        counters = expected_counters(
            {m: list(c) for m, c in self.catalog.chains.items()}, arrivals
        )
        placement = place_blocks(self.config.placement_mode, counters,
                                 self.served_blocks(), free, servers)
        for block_id, device_id in placement.assignments:
            self.create_instance(block_id, device_id, resident=True)
        self.log_decision('placement', mode=str(self.config.placement_mode),
                          assignments=placement.assignments,
                          skipped=placement.skipped)
        return placement

    def review_placement(self, now=None):
        """Réplicas para pares quentes observados na janela corrente."""
        if str(self.config.placement_mode) != PlacementMode.LOCALITY:
            return Placement()
        counts = self.locality.counts(self.sim.now)
        if not counts:
            return Placement()
        existing = {}
        for instance in self.instances.values():
            existing.setdefault(instance.block_id, []).append(
                instance.device_id
            )
        blocks = {b: self.profiles.profile(b).param_bytes for b in existing}
        free, servers = self.placement_inputs()
        placement = place_blocks(PlacementMode.LOCALITY, counts, blocks,
                                 free, servers, existing)
        for block_id, device_id in placement.assignments:
            self.create_instance(block_id, device_id)
        if placement.assignments:
            self.log_decision('placement_review',
                              assignments=placement.assignments)
        return placement

    # ------------------------------------------------------------------
    # Revisões periódicas
    # ------------------------------------------------------------------

    @property
    def outstanding(self):
        if len(self.requests) < self.expected_arrivals:
            return True
        return any(not r.done for r in self.requests.values())

    def start_reviews(self):
        config = self.config
        self.sim.after(config.review_period_us, EventKind.SCALE_CHECK)
        self.sim.after(config.review_period_us, EventKind.PLACEMENT_REVIEW)
        self.sim.after(config.kv_review_period_us, EventKind.KV_REVIEW)
        self.sim.after(config.metrics_tick_us, EventKind.METRICS_TICK)

    def _again(self, kind, period_us):
        if self.outstanding:
            self.sim.after(period_us, kind)

    def _on_scale_check(self, event):
        self.check_scaling(self.sim.now)
        self._again(EventKind.SCALE_CHECK, self.config.review_period_us)

    def _on_placement_review(self, event):
        if str(self.config.speculation) != SpeculationMode.OFF:
            self.plan_speculation(self.sim.now)
        self.review_placement(self.sim.now)
        self._again(EventKind.PLACEMENT_REVIEW, self.config.review_period_us)

    def reclaim_kv(self):
        """Libera cópias de KV fora do dono atual, exceto em migração."""
        owners = {k: d for k, d in self.kv_home.items()
                  if k not in self.migrations}
        reclaimed = reclaim_duplicates(self.pools, owners)
        total = sum(r['bytes'] for r in reclaimed)
        if reclaimed:
            self.metrics.count(self.sim.now, 'kv_reclaimed_bytes', total)
            self.log_decision('kv_reclaim', segments=len(reclaimed),
                              bytes=total)
        return reclaimed

    def _on_kv_review(self, event):
        self.reclaim_kv()
        self._again(EventKind.KV_REVIEW, self.config.kv_review_period_us)

    def memory_totals(self):
        params = reqdata = 0
        for device_id in self.cluster.device_ids:
            ledger = self.cluster.device(device_id).ledger
            params += ledger.category_used(MemoryCategory.PARAMS)
            reqdata += ledger.category_used(MemoryCategory.KV) + \
                ledger.category_used(MemoryCategory.ACTIVATIONS)
        return params, reqdata

    def _on_metrics_tick(self, event):
        self.metrics.memory_sample(self.sim.now, *self.memory_totals())
        self._again(EventKind.METRICS_TICK, self.config.metrics_tick_us)

    # ------------------------------------------------------------------
    # Execução
    # ------------------------------------------------------------------

    def run(self, arrivals, until=None):
        """
        Posiciona, agenda as chegadas e roda até drenar.

        Returns:
            dict: relatório do coletor
        """
        self.provision(arrivals)
        self.load(arrivals)
        self.start_reviews()
        self.sim.run(until)
        return self.report()

    def report(self):
        extra = {
            'mode': self.catalog.mode,
            'instances': len(self.instances),
            'network_bytes': dict(sorted(self.network.bytes_moved.items())),
            'events': self.sim.processed,
        }
        # drenado: a janela termina na última conclusão, não na última
        # revisão periódica
        end = self.sim.now
        if self.requests and not self.outstanding:
            end = max(r.completion for r in self.requests.values())
        return self.metrics.finalize(end, self.cluster.device_ids, extra)

    def assert_drained(self):
        """Sem KV nem ativações sobrando depois de drenar."""
        for device_id in self.cluster.device_ids:
            self.pools[device_id].assert_consistent()
            self.cluster.device(device_id).ledger.assert_drained(
                [MemoryCategory.KV, MemoryCategory.ACTIVATIONS]
            )
