"""
Cache KV paginado por dispositivo e coordenação de migrações.

Cada página pertence a um bloco e guarda o conjunto de requisições que a
referenciam; a página é liberada exatamente quando esse conjunto esvazia.
Páginas de prefixo compartilhado (mesmo conteúdo, mesmo bloco, mesmo
dispositivo) são reaproveitadas com contagem incrementada.
"""
import logging
import math

import numpy as np

from app_cluster.models import MemoryCategory, Phase
from app_kv.models import (InterceptionEstimate, KvPage, KvPolicy, KvSegment,
                           MigrationPlan)
from utils.app_cluster.exceptions import CapacityExhaustedError
from utils.app_kv.exceptions import (KvAllocationError,
                                     MigrationRefusedError,
                                     UnknownSegmentError)
from utils.commons.units import US_PER_S, ceil_us
from utils.commons.validators import simulation_setting

logger = logging.getLogger(__name__)


def pages_for(tokens, tokens_per_page):
    """ceil(tokens / tokens_per_page)."""
    if tokens <= 0:
        return 0
    return -(-int(tokens) // int(tokens_per_page))


class KvPool:
    """
    Tabela de páginas de um dispositivo. Os bytes de cada página ficam
    reservados no livro de memória do dispositivo na categoria `kv`.
    """

    def __init__(self, device, tokens_per_page=None):
        self.device = device
        self.device_id = device.id
        self.ledger = device.ledger
        self.tokens_per_page = tokens_per_page or \
            simulation_setting('TOKENS_PER_PAGE')
        self.pages = {}
        self.segments = {}
        self._by_content = {}
        self._next_page = 0
        device.kv_pool = self

    @property
    def bytes_live(self):
        return sum(p.bytes for p in self.pages.values())

    def page_bytes(self, bytes_per_token):
        return self.tokens_per_page * int(bytes_per_token)

    def has_segment(self, request_id, block_id):
        return (request_id, block_id) in self.segments

    def segment(self, request_id, block_id):
        try:
            return self.segments[(request_id, block_id)]
        except KeyError:
            raise UnknownSegmentError(
                self.device_id, request_id, block_id
            ) from None

    def segments_of(self, request_id):
        return [s for (r, _), s in sorted(self.segments.items())
                if r == request_id]

    def _new_page(self, block_id, nbytes, span, request_id, content_key):
        page_id = f"{self.device_id}:p{self._next_page}"
        self._next_page += 1
        self.ledger.allocate(MemoryCategory.KV, page_id, nbytes)
        page = KvPage(
            id=page_id, device=self.device_id, block_id=block_id,
            bytes=nbytes, span=span, refs={request_id},
            content_key=content_key,
        )
        self.pages[page_id] = page
        if content_key is not None:
            self._by_content[(block_id, content_key)] = page
        return page

    def _page_plan(self, block_id, first_page, last_page, prefix_key,
                   prefix_tokens):
        """Para cada índice de página: página existente reaproveitável ou None."""
        plan = []
        for index in range(first_page, last_page):
            span = (index * self.tokens_per_page,
                    (index + 1) * self.tokens_per_page)
            content_key = None
            if prefix_key is not None and span[1] <= prefix_tokens:
                content_key = (prefix_key, index)
            shared = self._by_content.get((block_id, content_key)) \
                if content_key is not None else None
            plan.append((index, span, content_key, shared))
        return plan

    def alloc(self, request_id, block_id, tokens, bytes_per_token,
              prefix_key=None, prefix_tokens=0):
        """
        Aloca ceil(tokens / página) páginas para (requisição, bloco).

        Páginas inteiramente dentro do prefixo compartilhado `prefix_key`
        reaproveitam a página existente no mesmo bloco.

        Raises:
            KvAllocationError: sem espaço para as páginas novas
        """
        key = (request_id, block_id)
        if key in self.segments:
            return self.append(request_id, block_id,
                               tokens - self.segments[key].tokens)
        nbytes = self.page_bytes(bytes_per_token)
        plan = self._page_plan(
            block_id, 0, pages_for(tokens, self.tokens_per_page),
            prefix_key, prefix_tokens,
        )
        needed = nbytes * sum(1 for *_, shared in plan if shared is None)
        if needed > self.ledger.free:
            raise KvAllocationError(self.device_id, needed, self.ledger.free)

        segment = KvSegment(
            request_id=request_id, block_id=block_id, device=self.device_id,
            tokens=int(tokens), bytes_per_token=int(bytes_per_token),
        )
        for index, span, content_key, shared in plan:
            if shared is not None:
                shared.refs.add(request_id)
                segment.pages.append(shared)
            else:
                segment.pages.append(self._new_page(
                    block_id, nbytes, span, request_id, content_key
                ))
        self.segments[key] = segment
        return segment

    def append(self, request_id, block_id, tokens):
        """
        Acrescenta `tokens` ao segmento (decode), criando as páginas que
        faltarem.

        Raises:
            KvAllocationError: sem espaço para as páginas novas
        """
        segment = self.segment(request_id, block_id)
        if tokens <= 0:
            return segment
        total = segment.tokens + int(tokens)
        have = len(segment.pages)
        missing = pages_for(total, self.tokens_per_page) - have
        nbytes = self.page_bytes(segment.bytes_per_token)
        if missing * nbytes > self.ledger.free:
            raise KvAllocationError(
                self.device_id, missing * nbytes, self.ledger.free
            )
        for index in range(have, have + missing):
            span = (index * self.tokens_per_page,
                    (index + 1) * self.tokens_per_page)
            segment.pages.append(
                self._new_page(block_id, nbytes, span, request_id, None)
            )
        segment.tokens = total
        return segment

    def adopt(self, segment):
        """
        Recebe um segmento migrado: páginas novas no destino, sem
        compartilhamento de prefixo.
        """
        nbytes = self.page_bytes(segment.bytes_per_token)
        count = len(segment.pages)
        if count * nbytes > self.ledger.free:
            raise KvAllocationError(
                self.device_id, count * nbytes, self.ledger.free
            )
        adopted = KvSegment(
            request_id=segment.request_id, block_id=segment.block_id,
            device=self.device_id, tokens=segment.tokens,
            bytes_per_token=segment.bytes_per_token,
            resume_time_estimate=segment.resume_time_estimate,
        )
        for page in segment.pages:
            adopted.pages.append(self._new_page(
                segment.block_id, nbytes, page.span, segment.request_id, None
            ))
        self.segments[adopted.key] = adopted
        return adopted

    def release(self, request_id, block_id):
        """
        Remove a referência da requisição a cada página do segmento e
        libera as páginas que ficarem sem referências.

        Returns:
            int: bytes devolvidos ao dispositivo
        """
        segment = self.segments.pop((request_id, block_id), None)
        if segment is None:
            return 0
        freed = 0
        for page in segment.pages:
            page.refs.discard(request_id)
            if page.refs:
                continue
            self.pages.pop(page.id, None)
            if page.content_key is not None:
                self._by_content.pop((page.block_id, page.content_key), None)
            freed += self.ledger.release(MemoryCategory.KV, page.id)
        return freed

    def truncate(self, request_id, block_id, tokens):
        """
        Reduz o segmento a `tokens`, liberando as páginas excedentes.
        """
        segment = self.segment(request_id, block_id)
        keep = pages_for(tokens, self.tokens_per_page)
        freed = 0
        for page in segment.pages[keep:]:
            page.refs.discard(request_id)
            if page.refs:
                continue
            self.pages.pop(page.id, None)
            if page.content_key is not None:
                self._by_content.pop((page.block_id, page.content_key), None)
            freed += self.ledger.release(MemoryCategory.KV, page.id)
        del segment.pages[keep:]
        segment.tokens = min(segment.tokens, int(tokens))
        return freed

    def release_request(self, request_id):
        return sum(
            self.release(request_id, segment.block_id)
            for segment in self.segments_of(request_id)
        )

    def assert_consistent(self):
        """bytes_live coincide com o livro de memória."""
        used = self.ledger.category_used(MemoryCategory.KV)
        if used != self.bytes_live:
            raise CapacityExhaustedError(
                self.device_id, MemoryCategory.KV.value, self.bytes_live, used
            )


# ============================================================================
# MIGRAÇÃO
# ============================================================================


def recompute_rate(profile_book, block_id, device, tokens_per_page=None,
                   chunk_tokens=None):
    """
    Páginas por µs recomputadas em prefill fatiado (um pedaço de
    `chunk_tokens` por vez).
    """
    tokens_per_page = tokens_per_page or simulation_setting('TOKENS_PER_PAGE')
    chunk_tokens = chunk_tokens or simulation_setting('RECOMPUTE_CHUNK_TOKENS')
    chunk_us = profile_book.comp_time(
        block_id, device, 1, Phase.PREFILL, chunk_tokens
    )
    if chunk_us <= 0:
        return math.inf
    return (chunk_tokens / tokens_per_page) / chunk_us


def copy_rate(bandwidth_Bps, page_bytes):
    """Páginas por µs copiadas no caminho."""
    if page_bytes <= 0 or math.isinf(bandwidth_Bps):
        return math.inf
    return bandwidth_Bps / US_PER_S / page_bytes


def policy_rates(policy, r_rec, r_cp):
    """Taxas efetivas de recomputação e cópia conforme a política de KV."""
    policy = str(policy)
    if policy == KvPolicy.RECALC_ONLY:
        return r_rec, 0.0
    if policy == KvPolicy.LEAST_BUSY:
        return 0.0, r_cp
    return r_rec, r_cp


def meet_point(pages, r_rec, r_cp):
    """
    Divisão ótima de P páginas entre recomputação (prefixo) e cópia
    (sufixo) quando as duas frentes avançam ao mesmo tempo.

    Returns:
        tuple[int, float]: (páginas recomputadas, conclusão em µs)
    """
    if pages <= 0:
        return 0, 0.0
    if r_rec <= 0 and r_cp <= 0:
        raise ValueError("nenhuma taxa positiva")
    if r_rec <= 0:
        return 0, pages / r_cp
    if r_cp <= 0:
        return pages, pages / r_rec
    if math.isinf(r_cp):
        return 0, 0.0
    if math.isinf(r_rec):
        return pages, 0.0

    def finish(m):
        return max(m / r_rec, (pages - m) / r_cp)

    guess = int(np.floor(r_rec * pages / (r_rec + r_cp)))
    options = {max(0, min(pages, m)) for m in (guess, guess + 1)}
    best = min(options, key=lambda m: (finish(m), m))
    return best, finish(best)


def plan_migration(segment, dst, r_rec, r_cp, dst_pool=None):
    """
    Planeja a migração de um segmento: recomputação da cabeça para a cauda
    no destino e cópia da cauda para a cabeça pela rede; termina quando as
    frentes se encontram.

    Raises:
        MigrationRefusedError: destino igual à origem, sem espaço ou sem
            taxa positiva
    """
    if segment.device == dst:
        raise MigrationRefusedError(
            segment.request_id, segment.block_id, 'destino igual à origem'
        )
    if r_rec <= 0 and r_cp <= 0:
        raise MigrationRefusedError(
            segment.request_id, segment.block_id, 'sem taxa positiva'
        )
    if dst_pool is not None:
        needed = len(segment.pages) * dst_pool.page_bytes(
            segment.bytes_per_token
        )
        if needed > dst_pool.ledger.free:
            raise MigrationRefusedError(
                segment.request_id, segment.block_id,
                f"destino {dst} sem espaço ({needed} bytes)",
            )
    meet, completion = meet_point(len(segment.pages), r_rec, r_cp)
    return MigrationPlan(
        segment=segment,
        src=segment.device,
        dst=dst,
        recompute_rate=r_rec,
        copy_rate=r_cp,
        meet_index=meet,
        completion_us=ceil_us(completion),
    )


def order_migrations(segments):
    """
    Ordena por ref crescente (páginas compartilhadas), depois pelo tempo
    estimado de retomada e por fim pelo id da requisição.
    """
    return sorted(
        segments,
        key=lambda s: (s.ref, s.resume_time_estimate, s.request_id,
                       s.block_id),
    )


def should_migrate_proactively(plan, predicted_remaining_us, now=0):
    """
    Migra apenas se a migração termina antes do reuso previsto; sem
    previsão não migra.
    """
    if predicted_remaining_us is None or plan is None:
        return False
    return now + predicted_remaining_us >= now + plan.completion_us


# ============================================================================
# INTERCEPTAÇÃO
# ============================================================================


class InterceptionTracker:
    """
    Tempo entre a saída de uma requisição de um bloco e a sua volta a ele
    (T_INT). A previsão do restante usa a média das amostras anteriores
    da própria requisição.
    """

    def __init__(self):
        self._open = {}
        self._samples = {}

    def begin(self, request_id, block_id, now):
        self._open[(request_id, block_id)] = InterceptionEstimate(
            request_id=request_id, t_call=now
        )

    def end(self, request_id, block_id, now):
        estimate = self._open.pop((request_id, block_id), None)
        if estimate is None:
            return None
        estimate.t_int = max(0, now - estimate.t_call)
        self._samples.setdefault(request_id, []).append(estimate.t_int)
        return estimate

    def current(self, request_id, block_id, now):
        estimate = self._open.get((request_id, block_id))
        if estimate is None:
            return None
        estimate.t_int = max(0, now - estimate.t_call)
        return estimate

    def mean(self, request_id):
        samples = self._samples.get(request_id)
        if not samples:
            return None
        return float(np.mean(samples))

    def predict_remaining(self, request_id, block_id, now):
        """
        Tempo previsto até a requisição voltar ao bloco, ou None sem
        histórico.
        """
        mean = self.mean(request_id)
        if mean is None:
            return None
        estimate = self.current(request_id, block_id, now)
        elapsed = estimate.t_int if estimate else 0
        return max(0, int(round(mean)) - elapsed)

    def forget(self, request_id):
        self._samples.pop(request_id, None)
        for key in [k for k in self._open if k[0] == request_id]:
            del self._open[key]


def reclaim_duplicates(pools, owners):
    """
    Libera segmentos obsoletos: cópias de (requisição, bloco) em
    dispositivos diferentes do dono atual.

    Args:
        pools: dict device_id -> KvPool
        owners: dict (request_id, block_id) -> device_id do segmento vivo

    Returns:
        list[dict]: segmentos liberados
    """
    reclaimed = []
    for device_id in sorted(pools):
        pool = pools[device_id]
        for key in sorted(pool.segments):
            owner = owners.get(key)
            if owner is None or owner == device_id:
                continue
            freed = pool.release(*key)
            reclaimed.append({
                'device': device_id,
                'request_id': key[0],
                'block_id': key[1],
                'bytes': freed,
            })
    if reclaimed:
        logger.debug("KV duplicado liberado: %d segmentos", len(reclaimed))
    return reclaimed
