"""
Núcleo determinístico de simulação a eventos discretos.

Relógio virtual em µs inteiros, fila de eventos (heapq) ordenada por
(fire_at, seq), streams de aleatoriedade independentes por consumidor e
laço de execução com orçamento de eventos.
"""
import hashlib
import heapq
import itertools
import logging
import zlib
from collections import Counter, deque

import numpy as np

from app_engine.models import Event, EventHandle, LogEntry
from utils.app_engine.exceptions import (LiveLockError, PastEventError,
                                         UnknownEventKindError)
from utils.commons.validators import simulation_setting

logger = logging.getLogger(__name__)

# janela de eventos recentes usada no diagnóstico de live-lock
_DIAGNOSTIC_WINDOW = 1000


def stream_seed(seed, stream_id):
    """Semente derivada de (seed, crc32(stream_id))."""
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream_id.encode())]


def make_rng(seed, stream_id):
    """
    Gerador numpy para um stream nomeado.

    O mesmo par (seed, stream_id) produz sempre a mesma sequência, e
    streams distintos não interferem entre si.
    """
    return np.random.default_rng(stream_seed(seed, stream_id))


class Simulation:
    """
    Laço de eventos single-thread.

    Handlers são registrados por tipo de evento com `on(kind, handler)` e
    recebem o próprio Event.
    """

    def __init__(self, seed=0, event_budget=None, record_log=True):
        self.seed = seed
        self.now = 0
        self.event_budget = (
            event_budget if event_budget is not None
            else simulation_setting('EVENT_BUDGET')
        )
        self.processed = 0
        self.record_log = record_log
        self.run_log = []
        self._queue = []
        self._seq = itertools.count()
        self._batch_seq = itertools.count()
        self._handlers = {}
        self._streams = {}
        self._recent = deque(maxlen=_DIAGNOSTIC_WINDOW)

    # ------------------------------------------------------------------
    # Agendamento
    # ------------------------------------------------------------------

    def on(self, kind, handler):
        """Registra o handler de um tipo de evento."""
        self._handlers[str(kind)] = handler

    def next_batch_id(self):
        """Identificador do próximo lote desta execução."""
        return next(self._batch_seq)

    def make_event(self, fire_at, kind, payload=None):
        """Cria um evento com o próximo número de sequência."""
        return Event(
            fire_at=int(fire_at),
            seq=next(self._seq),
            kind=str(kind),
            payload=payload,
        )

    def schedule(self, event):
        """
        Insere um evento na fila.

        Args:
            event: Event criado por `make_event`

        Returns:
            EventHandle: permite cancelamento

        Raises:
            PastEventError: fire_at anterior ao relógio atual
        """
        if event.fire_at < self.now:
            raise PastEventError(event.fire_at, self.now)
        heapq.heappush(self._queue, event)
        return EventHandle(event)

    def at(self, fire_at, kind, payload=None):
        """Atalho: cria e agenda um evento no instante absoluto."""
        return self.schedule(self.make_event(fire_at, kind, payload))

    def after(self, delay_us, kind, payload=None):
        """Atalho: agenda `delay_us` µs após o relógio atual."""
        return self.at(self.now + max(0, int(delay_us)), kind, payload)

    def cancel(self, handle):
        """Cancelamento preguiçoso: o evento é descartado ao sair da fila."""
        if handle is not None:
            handle.event.cancelled = True

    def peek(self):
        """Próximo evento válido sem removê-lo, ou None."""
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0] if self._queue else None

    @property
    def pending(self):
        return sum(1 for e in self._queue if not e.cancelled)

    # ------------------------------------------------------------------
    # Execução
    # ------------------------------------------------------------------

    def run(self, until=None):
        """
        Processa eventos em ordem (fire_at, seq).

        Args:
            until: instante limite (inclusive); None drena a fila

        Returns:
            int: relógio ao término

        Raises:
            LiveLockError: orçamento de eventos excedido
        """
        while True:
            event = self.peek()
            if event is None:
                break
            if until is not None and event.fire_at > until:
                break
            heapq.heappop(self._queue)

            self.processed += 1
            if self.processed > self.event_budget:
                top = Counter(self._recent).most_common(3)
                logger.error(
                    "Orçamento de %d eventos excedido em t=%d",
                    self.event_budget, self.now
                )
                raise LiveLockError(self.event_budget, self.now, top)

            self.now = event.fire_at
            self._recent.append(event.kind)
            if self.record_log:
                self.run_log.append(
                    LogEntry(event.fire_at, event.seq, event.kind)
                )

            handler = self._handlers.get(event.kind)
            if handler is None:
                raise UnknownEventKindError(event.kind)
            handler(event)

        if until is not None and until > self.now:
            self.now = until
        return self.now

    # ------------------------------------------------------------------
    # Aleatoriedade e auditoria
    # ------------------------------------------------------------------

    def rng(self, stream_id):
        """Gerador do stream `stream_id`, criado no primeiro uso."""
        generator = self._streams.get(stream_id)
        if generator is None:
            generator = make_rng(self.seed, stream_id)
            self._streams[stream_id] = generator
        return generator

    def log_lines(self):
        return [entry.as_line() for entry in self.run_log]

    def log_digest(self):
        """sha256 do log de eventos (uma linha por evento)."""
        digest = hashlib.sha256()
        for entry in self.run_log:
            digest.update(entry.as_line().encode())
            digest.update(b'\n')
        return digest.hexdigest()
