"""
Coleta de métricas dirigida pelos eventos do motor.

Tudo que o coletor sabe vem de fatos anexados a um log; o relatório é
função pura desse log (`MetricsCollector.from_log` reconstrói o mesmo
estado).
"""
import csv
import json
import logging
import math
from pathlib import Path

from app_metrics.models import Fact, FactKind, RequestRecord, StepCategory
from utils.app_metrics.exceptions import EmptySamplesError, UnknownFactError
from utils.commons.units import us_to_seconds

logger = logging.getLogger(__name__)

LATENCY_KEYS = ('p50_us', 'p95_us', 'p99_us', 'mean_us', 'max_us')

COUNTERS = (
    'adaptive', 'speculation_attempts', 'speculation_accepts',
    'speculation_rejects', 'kv_copy_bytes', 'kv_recompute_pages',
    'migrations', 'proactive_migrations', 'inter_server_forwardings',
    'forwardings', 'scale_actions', 'block_loads', 'retries',
    'kv_reclaimed_bytes',
)


def percentile(samples, q):
    """
    Percentil por posto mais próximo: ceil(q·n)-ésima estatística de ordem.

    Args:
        q: fração em (0, 1]

    Raises:
        EmptySamplesError: amostra vazia
    """
    ordered = sorted(samples)
    if not ordered:
        raise EmptySamplesError()
    rank = max(1, math.ceil(q * len(ordered) - 1e-9))
    return ordered[min(rank, len(ordered)) - 1]


def interval_union(intervals):
    """Comprimento total da união de intervalos [início, fim)."""
    total, current_start, current_end = 0, None, None
    for start, end in sorted(intervals):
        if end <= start:
            continue
        if current_end is None or start > current_end:
            if current_end is not None:
                total += current_end - current_start
            current_start, current_end = start, end
        else:
            current_end = max(current_end, end)
    if current_end is not None:
        total += current_end - current_start
    return total


def clip(intervals, low, high):
    return [(max(s, low), min(e, high)) for s, e in intervals
            if e > low and s < high]


class MetricsCollector:

    def __init__(self, tick_us=None):
        self.tick_us = tick_us
        self.facts = []
        self.records = {}
        self.busy = {}
        self.memory = []
        self.counters = {name: 0 for name in COUNTERS}
        self.decisions = []

    @classmethod
    def from_log(cls, facts, tick_us=None):
        collector = cls(tick_us=tick_us)
        for fact in facts:
            collector._record(fact)
        return collector

    # ------------------------------------------------------------------
    # Fatos
    # ------------------------------------------------------------------

    def _record(self, fact):
        self.facts.append(fact)
        handler = getattr(self, f"_apply_{fact.kind}", None)
        if handler is None:
            raise UnknownFactError(fact.kind)
        handler(fact)

    def _apply_arrival(self, fact):
        request_id, app_id = fact.data
        self.records[request_id] = RequestRecord(
            request_id=request_id, app_id=app_id, arrival=fact.t
        )

    def _apply_interval(self, fact):
        request_id, category, start, end = fact.data
        self.records[request_id].intervals.append((start, end, category))

    def _apply_tokens(self, fact):
        request_id, count = fact.data
        self.records[request_id].tokens += count

    def _apply_completion(self, fact):
        self.records[fact.data[0]].completion = fact.t

    def _apply_flag(self, fact):
        request_id, flag = fact.data
        setattr(self.records[request_id], flag, True)

    def _apply_busy(self, fact):
        device_id, start, end = fact.data
        self.busy.setdefault(device_id, []).append((start, end))

    def _apply_memory(self, fact):
        params, reqdata = fact.data
        self.memory.append((fact.t, params, reqdata))

    def _apply_counter(self, fact):
        name, amount = fact.data
        self.counters[name] = self.counters.get(name, 0) + amount

    def _apply_decision(self, fact):
        self.decisions.append(fact.data[0])

    # ------------------------------------------------------------------
    # API usada pelo motor
    # ------------------------------------------------------------------

    def arrival(self, t, request_id, app_id):
        self._record(Fact(t, FactKind.ARRIVAL.value, (request_id, app_id)))

    def interval(self, request_id, category, start, end):
        if end > start:
            self._record(Fact(end, FactKind.INTERVAL.value,
                              (request_id, str(category), start, end)))

    def tokens(self, t, request_id, count=1):
        self._record(Fact(t, FactKind.TOKENS.value, (request_id, count)))

    def completion(self, t, request_id):
        self._record(Fact(t, FactKind.COMPLETION.value, (request_id,)))

    def flag(self, t, request_id, flag):
        self._record(Fact(t, FactKind.FLAG.value, (request_id, flag)))

    def device_busy(self, device_id, start, end):
        if end > start:
            self._record(Fact(end, FactKind.BUSY.value,
                              (device_id, start, end)))

    def memory_sample(self, t, params_bytes, reqdata_bytes):
        self._record(Fact(t, FactKind.MEMORY.value,
                          (params_bytes, reqdata_bytes)))

    def count(self, t, name, amount=1):
        if amount:
            self._record(Fact(t, FactKind.COUNTER.value, (name, amount)))

    def decision(self, t, text):
        self._record(Fact(t, FactKind.DECISION.value, (text,)))

    # ------------------------------------------------------------------
    # Relatório
    # ------------------------------------------------------------------

    def completed(self):
        return [r for _, r in sorted(self.records.items()) if r.done]

    def in_flight(self):
        return [r for _, r in sorted(self.records.items()) if not r.done]

    def decomposition(self, record):
        """Tempo por categoria (uniões) e o restante sem etapa registrada."""
        window = (record.arrival, record.completion)
        result = {}
        for category in StepCategory.values:
            spans = [(s, e) for s, e, c in record.intervals if c == category]
            result[category] = interval_union(clip(spans, *window))
        covered = interval_union(
            clip([(s, e) for s, e, _ in record.intervals], *window)
        )
        result['other'] = record.latency - covered
        return result

    def utilization(self, device_ids, start, end):
        span = end - start
        if span <= 0:
            return {d: 0.0 for d in device_ids}
        return {
            d: interval_union(clip(self.busy.get(d, []), start, end)) / span
            for d in device_ids
        }

    def timeseries(self, device_ids):
        rows, previous = [], 0
        for t, params, reqdata in self.memory:
            util = self.utilization(device_ids, previous, t)
            mean = sum(util.values()) / len(util) if util else 0.0
            rows.append((t, round(mean, 6), params, reqdata))
            previous = t
        return rows

    def finalize(self, duration_us, device_ids, extra=None):
        """
        Relatório final. Requisições não concluídas ficam fora das
        estatísticas de latência e são contadas em `in_flight`.
        """
        done = self.completed()
        latencies = [r.latency for r in done]
        tokens = sum(r.tokens for r in self.records.values())
        util = self.utilization(device_ids, 0, duration_us)
        duration_s = us_to_seconds(duration_us) if duration_us else 0.0

        report = {
            'completed': len(done),
            'in_flight': len(self.in_flight()),
            'duration_us': duration_us,
            'tokens': tokens,
            'throughput_tokens_per_s': (
                tokens / duration_s if duration_s else 0.0
            ),
            'util_proxy': {
                'per_device': {d: round(v, 6) for d, v in util.items()},
                'mean': round(sum(util.values()) / len(util), 6)
                if util else 0.0,
            },
            'counters': dict(sorted(self.counters.items())),
            'adaptive_requests': sum(1 for r in done if r.adaptive),
            'speculated_requests': sum(1 for r in done if r.speculated),
        }
        if latencies:
            totals = {c: 0 for c in list(StepCategory.values) + ['other']}
            for record in done:
                for category, value in self.decomposition(record).items():
                    totals[category] += value
            total_latency = sum(latencies)
            report['latency'] = {
                'p50_us': percentile(latencies, 0.50),
                'p95_us': percentile(latencies, 0.95),
                'p99_us': percentile(latencies, 0.99),
                'mean_us': total_latency / len(latencies),
                'max_us': max(latencies),
            }
            report['decomposition_us'] = totals
            report['comm_fraction'] = (
                totals[StepCategory.TRANSFER] / total_latency
                if total_latency else 0.0
            )
        else:
            report['latency'] = dict.fromkeys(LATENCY_KEYS)
            report['decomposition_us'] = None
            report['comm_fraction'] = 0.0
        report['memory'] = {
            'params_peak': max((p for _, p, _ in self.memory), default=0),
            'reqdata_peak': max((q for _, _, q in self.memory), default=0),
            'samples': len(self.memory),
        }
        report.update(extra or {})
        return report

    def latency_cdf(self):
        latencies = sorted(r.latency for r in self.completed())
        n = len(latencies)
        return [(value, (i + 1) / n) for i, value in enumerate(latencies)]


def write_outputs(collector, report, device_ids, out_dir):
    """
    Grava report.json, latency_cdf.csv, timeseries.csv e decisions.log.

    Returns:
        dict: caminhos gravados
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        'report': out_dir / 'report.json',
        'latency_cdf': out_dir / 'latency_cdf.csv',
        'timeseries': out_dir / 'timeseries.csv',
        'decisions': out_dir / 'decisions.log',
    }
    paths['report'].write_text(
        json.dumps(report, indent=2, sort_keys=True, default=str) + '\n'
    )
    with paths['latency_cdf'].open('w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['latency_us', 'cum_fraction'])
        for value, fraction in collector.latency_cdf():
            writer.writerow([value, f"{fraction:.6f}"])
    with paths['timeseries'].open('w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['t_us', 'util_proxy', 'mem_params', 'mem_reqdata'])
        for row in collector.timeseries(device_ids):
            writer.writerow(row)
    paths['decisions'].write_text(
        ''.join(line + '\n' for line in collector.decisions)
    )
    logger.info("Relatórios gravados em %s", out_dir)
    return {name: str(path) for name, path in paths.items()}
