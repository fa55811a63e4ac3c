"""
Geração de chegadas Poisson por aplicação e reprodução de traços de
timestamps.
"""
import csv
import hashlib
import logging
import math
from pathlib import Path

import numpy as np

from app_engine.services import make_rng
from app_workload.models import Arrival, MappingRule
from utils.app_workload.exceptions import (EmptyWorkloadError,
                                           MalformedTraceError)
from utils.commons.exceptions import ConfigError
from utils.commons.units import US_PER_S

logger = logging.getLogger(__name__)

ARRIVALS_HEADER = ['arrival_us', 'app_id', 'prompt_tokens', 'output_tokens']


def largest_remainder(weights, total):
    """
    Reparte `total` proporcionalmente aos pesos; as sobras vão para as
    maiores partes fracionárias (empate: menor índice).
    """
    weights = np.asarray(weights, dtype=float)
    if weights.size == 0:
        raise EmptyWorkloadError('nenhuma aplicação')
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(int)
    remainder = int(total - counts.sum())
    order = sorted(range(len(quotas)),
                   key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return [int(c) for c in counts]


def poisson_times(rng, count, duration_us):
    """
    `count` chegadas de um processo de Poisson condicionadas a cair em
    [0, duration): somas acumuladas normalizadas de count+1 intervalos
    exponenciais.
    """
    if count <= 0:
        return []
    gaps = rng.exponential(1.0, count + 1)
    cumulative = np.cumsum(gaps)
    positions = cumulative[:-1] / cumulative[-1] * duration_us
    return [min(int(p), duration_us - 1) for p in positions]


def draw_lengths(rng, count, prompt_range, output_range, max_length):
    prompts = rng.integers(prompt_range[0], prompt_range[1] + 1, count)
    outputs = rng.integers(output_range[0], output_range[1] + 1, count)
    result = []
    for prompt, output in zip(prompts, outputs):
        prompt = int(min(prompt, max_length - 1))
        output = int(max(1, min(output, max_length - prompt)))
        result.append((prompt, output))
    return result


def _finalize(entries, shared_prefix_tokens):
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    return [
        Arrival(
            request_id=f"req-{k:05d}",
            arrival_us=arrival,
            app_id=app_id,
            prompt_tokens=prompt,
            output_tokens=output,
            prefix_tokens=min(shared_prefix_tokens, prompt),
        )
        for k, (arrival, app_id, _, prompt, output) in enumerate(entries)
    ]


def generate(spec):
    """
    Carga sintética: pesos por aplicação, contagem por maior resto e
    chegadas Poisson independentes por aplicação.

    Raises:
        EmptyWorkloadError: nenhuma aplicação
    """
    apps = spec.app_ids()
    if not apps:
        raise EmptyWorkloadError('nenhuma aplicação')
    if spec.weights:
        if len(spec.weights) != len(apps):
            raise ConfigError(
                "Pesos e aplicações com tamanhos diferentes",
                errors={'workload.weights': 'um peso por aplicação'},
            )
        weights = list(spec.weights)
    else:
        weights = make_rng(spec.seed, 'workload-weights').uniform(
            0.0, 1.0, len(apps)
        ).tolist()
    counts = largest_remainder(weights, spec.total_requests)
    duration_us = int(spec.duration_s * US_PER_S)

    arrivals_rng = make_rng(spec.seed, 'workload-arrivals')
    lengths_rng = make_rng(spec.seed, 'workload-lengths')
    entries = []
    for app_id, count in zip(apps, counts):
        times = poisson_times(arrivals_rng, count, duration_us)
        lengths = draw_lengths(
            lengths_rng, count, spec.prompt_range, spec.output_range,
            spec.max_sequence_length,
        )
        for index, (arrival, (prompt, output)) in enumerate(
                zip(times, lengths)):
            entries.append((arrival, app_id, index, prompt, output))
    logger.info(
        "Carga sintética: %d requisições em %d aplicações",
        len(entries), len(apps)
    )
    return _finalize(entries, spec.shared_prefix_tokens)


# ============================================================================
# REPRODUÇÃO DE TRAÇO
# ============================================================================


def parse_trace(path, tolerance=0.01):
    """
    Lê linhas `epoch_seconds,count` ou `epoch_seconds`. Linhas vazias e
    comentários (#) são ignorados.

    Raises:
        EmptyWorkloadError: arquivo sem eventos válidos
        MalformedTraceError: mais de `tolerance` das linhas inválidas
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"Traço ilegível: {path}",
                          errors={'trace': str(exc)}) from exc
    events, malformed, total = [], [], 0
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        total += 1
        parts = [p.strip() for p in line.split(',')]
        try:
            if len(parts) > 2:
                raise ValueError(line)
            stamp = float(parts[0])
            count = int(parts[1]) if len(parts) == 2 else 1
            if count < 0 or not math.isfinite(stamp):
                raise ValueError(line)
        except ValueError:
            malformed.append(number)
            continue
        events.append((stamp, count))
    if malformed and len(malformed) > tolerance * total:
        raise MalformedTraceError(path, malformed, total)
    if malformed:
        logger.warning("%s: linhas ignoradas %s", path, malformed)
    if not events or sum(c for _, c in events) == 0:
        raise EmptyWorkloadError(f"traço {path} sem eventos")
    return sorted(events)


def map_rates(rates, min_qps, max_qps):
    """
    Mapa linear das taxas por janela para [min_qps, max_qps]; taxa
    constante vai para o ponto médio.
    """
    rates = np.asarray(rates, dtype=float)
    low, high = rates.min(), rates.max()
    if high == low:
        return [(min_qps + max_qps) / 2] * len(rates)
    mapped = min_qps + (rates - low) / (high - low) * (max_qps - min_qps)
    return mapped.tolist()


def window_rates(events, window_s):
    """Eventos por segundo em janelas consecutivas do traço."""
    start = events[0][0]
    span = max(events[-1][0] - start, 0.0)
    windows = max(1, int(math.floor(span / window_s)) + 1)
    counts = np.zeros(windows)
    for stamp, count in events:
        index = min(windows - 1, int((stamp - start) // window_s))
        counts[index] += count
    return (counts / window_s).tolist()


class SmoothWeightedRoundRobin:
    """Round-robin ponderado suave (sequência determinística)."""

    def __init__(self, apps, weights):
        self.apps = list(apps)
        self.weights = [float(w) for w in weights]
        self.current = [0.0] * len(self.apps)
        self.total = sum(self.weights)

    def next(self):
        for i, weight in enumerate(self.weights):
            self.current[i] += weight
        best = max(range(len(self.apps)), key=lambda i: (self.current[i], -i))
        self.current[best] -= self.total
        return self.apps[best]


def replay(spec, apps, weights=None):
    """
    Chegadas a partir de um traço: as janelas do traço são esticadas sobre
    a duração simulada, cada uma com a taxa mapeada para
    [min_qps, max_qps], e as requisições são distribuídas entre as
    aplicações pela regra de mapeamento.
    """
    if not apps:
        raise EmptyWorkloadError('nenhuma aplicação')
    weights = list(weights) if weights else [1.0] * len(apps)
    events = parse_trace(spec.path, spec.malformed_tolerance)
    qps = map_rates(window_rates(events, spec.window_s),
                    spec.min_qps, spec.max_qps)

    duration_us = int(spec.duration_s * US_PER_S)
    window_us = duration_us / len(qps)
    times = []
    for k, rate in enumerate(qps):
        count = int(round(rate * window_us / US_PER_S))
        start = k * window_us
        for j in range(count):
            times.append(int(start + j * window_us / count))

    if spec.mapping == MappingRule.WEIGHTED_RANDOM:
        rng = make_rng(spec.seed, 'trace-mapping')
        probs = np.asarray(weights, float) / sum(weights)
        chosen = [apps[i] for i in rng.choice(len(apps), len(times), p=probs)]
    else:
        picker = SmoothWeightedRoundRobin(apps, weights)
        chosen = [picker.next() for _ in times]

    lengths = draw_lengths(
        make_rng(spec.seed, 'trace-lengths'), len(times), spec.prompt_range,
        spec.output_range, spec.max_sequence_length,
    )
    entries = [
        (arrival, app_id, index, prompt, output)
        for index, (arrival, app_id, (prompt, output)) in enumerate(
            zip(times, chosen, lengths))
    ]
    logger.info("Traço %s: %d requisições", spec.path, len(entries))
    return _finalize(entries, spec.shared_prefix_tokens)


# ============================================================================
# ARQUIVO PORTÁVEL DE CHEGADAS
# ============================================================================


def export_arrivals(arrivals, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(ARRIVALS_HEADER)
        for arrival in arrivals:
            writer.writerow(arrival.as_row())
    return path


def load_arrivals(path, shared_prefix_tokens=32):
    """
    Raises:
        ConfigError: arquivo ausente ou colunas inválidas
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Arquivo de chegadas não encontrado: {path}",
                          errors={'arrivals': str(path)})
    entries = []
    with path.open(newline='') as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != ARRIVALS_HEADER:
            raise ConfigError(
                f"Cabeçalho inválido em {path}",
                errors={'arrivals': ','.join(reader.fieldnames or [])},
            )
        for index, row in enumerate(reader):
            try:
                entries.append((
                    int(row['arrival_us']), row['app_id'], index,
                    int(row['prompt_tokens']), int(row['output_tokens']),
                ))
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"{path}: linha {index + 2} inválida",
                    errors={'arrivals': str(exc)},
                ) from exc
    return _finalize(entries, shared_prefix_tokens)


def workload_digest(arrivals):
    """sha256 sobre as linhas canônicas da carga."""
    digest = hashlib.sha256()
    for arrival in arrivals:
        digest.update(
            ','.join(str(v) for v in arrival.as_row()).encode() + b'\n'
        )
    return digest.hexdigest()
