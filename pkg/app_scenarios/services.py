"""
Execução de cenários: leitura e validação do documento, montagem do
zoológico, do cluster, dos perfis, do catálogo do modo e da carga, e a
comparação de relatórios.
"""
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from app_cluster.services import ProfileBook, default_testbed, load_cluster
from app_engine.services import Simulation
from app_metrics.services import write_outputs
from app_scenarios.serializers import WorkloadKind, validate_scenario
from app_scheduler.models import (SchedulerConfig, ServingMode,
                                  SpeculationMode)
from app_scheduler.services import Scheduler
from app_workload.models import TraceSpec, WorkloadSpec
from app_workload.services import (generate, load_arrivals, replay,
                                   workload_digest)
from app_zoo.services import (block_catalog, load_zoo, param_share_catalog,
                              per_model_catalog)
from utils.app_scenarios.exceptions import (DigestMismatchError,
                                            InvalidReportError,
                                            NotEnoughReportsError)
from utils.app_scenarios.schemas import REPORT_SCHEMA, SCENARIO_SCHEMA
from utils.commons.documents import (deep_merge, load_document, read_file,
                                     resolve_section, validate_document)
from utils.commons.exceptions import ConfigError, SchemaViolationError
from utils.commons.units import US_PER_S
from utils.commons.validators import simulation_setting

logger = logging.getLogger(__name__)

SECTIONS = ('zoo', 'cluster', 'profiles', 'workload')
ABLATION_KEYS = ('adaptive', 'kv_policy', 'speculation', 'placement')

CATALOG_BUILDERS = {
    ServingMode.BLOCK: block_catalog,
    ServingMode.PER_MODEL: per_model_catalog,
    ServingMode.PARAM_SHARE: param_share_catalog,
}


# ============================================================================
# DOCUMENTO DE CENÁRIO
# ============================================================================


@dataclass
class Scenario:
    data: dict
    base_dir: str = '.'
    # pasta de cada seção, para resolver caminhos internos
    section_dirs: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.data['seed']

    @property
    def mode(self):
        return self.data['mode']

    @property
    def digest(self):
        """sha256 do cenário normalizado, sem o diretório de saída."""
        canonical = {k: v for k, v in self.data.items() if k != 'out'}
        text = json.dumps(canonical, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()

    def section_dir(self, name):
        return self.section_dirs.get(name, self.base_dir)


def parse_ablation(pairs):
    """
    Converte `k=v` da linha de comando em overrides de ablação.

    Raises:
        ConfigError: par sem '=' ou chave desconhecida
    """
    result, errors = {}, {}
    for pair in pairs or ():
        key, sep, value = pair.partition('=')
        key = key.strip().replace('-', '_')
        if not sep:
            errors[f"ablation.{pair}"] = "use chave=valor"
        elif key not in ABLATION_KEYS:
            errors[f"ablation.{key}"] = (
                f"chave desconhecida; use {', '.join(ABLATION_KEYS)}"
            )
        else:
            result[key] = value.strip()
    if errors:
        raise ConfigError("Ablação inválida", errors=errors)
    return result


def apply_overrides(document, mode=None, seed=None, ablation=None, out=None):
    """
    Overrides da linha de comando vencem o documento. Trocar para um modo
    de referência desliga a especulação e o serviço adaptativo herdados
    do documento, salvo se a própria linha de comando os pedir.
    """
    override = {}
    ablation = dict(ablation or {})
    if mode is not None:
        override['mode'] = mode
        if mode != ServingMode.BLOCK:
            reset = {'speculation': SpeculationMode.OFF.value,
                     'adaptive': False}
            reset.update(ablation)
            ablation = reset
            logger.info("Modo %s: especulação e serviço adaptativo "
                        "desligados", mode)
    if seed is not None:
        override['seed'] = seed
    if ablation:
        override['ablation'] = ablation
    if out is not None:
        override['out'] = str(out)
    return deep_merge(document, override)


def build_scenario(document, base_dir='.'):
    """
    Resolve as seções (objeto inline ou caminho) e valida o cenário.

    Raises:
        SchemaViolationError: forma do documento
        ConfigError: semântica (modos, chaves, faixas, regras cruzadas)
    """
    document = dict(document)
    document.pop('_base_dir', None)
    validate_document(document, SCENARIO_SCHEMA, 'scenario')
    section_dirs = {}
    for name in SECTIONS:
        if name in document:
            document[name], section_dirs[name] = resolve_section(
                document[name], base_dir
            )
    data = validate_scenario(document)
    return Scenario(data=data, base_dir=str(base_dir),
                    section_dirs=section_dirs)


def load_scenario(path, **overrides):
    """Lê o cenário do disco (com `include`) e aplica os overrides."""
    document = load_document(path)
    base_dir = document.pop('_base_dir')
    document = apply_overrides(document, **overrides)
    scenario = build_scenario(document, base_dir)
    logger.info("Cenário %s: modo %s, semente %d", path, scenario.mode,
                scenario.seed)
    return scenario


# ============================================================================
# MONTAGEM
# ============================================================================


@dataclass
class Runtime:
    scenario: Scenario
    sim: Simulation
    cluster: object
    zoo: object
    catalog: object
    profiles: ProfileBook
    scheduler: Scheduler
    arrivals: list


def build_cluster(scenario):
    document = scenario.data.get('cluster')
    if not document:
        return default_testbed()
    return load_cluster(document)


def build_zoo(scenario):
    document = dict(scenario.data['zoo'])
    threshold = scenario.data['scheduler'].get('equivalence_threshold')
    if threshold is not None:
        document['threshold'] = threshold
    zoo, _ = load_zoo(document, scenario.section_dir('zoo'))
    return zoo


def build_catalog(zoo, mode):
    return CATALOG_BUILDERS[mode](zoo)


def surcharge_of(scenario):
    value = scenario.data['scheduler'].get('surcharge_per_branch')
    if value is None:
        value = simulation_setting('PARAM_SHARE_SURCHARGE')
    return value


def build_profiles(scenario, zoo, catalog):
    """
    Perfis de todos os blocos do zoológico, das costuras do catálogo e dos
    blocos compostos dos modos de referência.
    """
    book = ProfileBook.from_document(scenario.data['profiles'],
                                     surcharge_per_branch=surcharge_of(
                                         scenario))
    for block_id, block in sorted(zoo.blocks.items()):
        book.derive(block_id, block.param_bytes, block.embed_dim_in,
                    block.embed_dim_out, block.family, block.shape,
                    embedding_bytes=block.embedding_bytes)
    if book.stitch_grids is not None:
        for stitch in catalog.stitches:
            book.stitch_profile(stitch.id, stitch.dim_in, stitch.dim_out)
    for block_id, (members, branches) in sorted(catalog.composites.items()):
        profile = book.composite(block_id, members, branches)
        # parâmetros residentes: todos os ramos mesclados, não só o
        # caminho usado no custo
        param_bytes = catalog.block(block_id).param_bytes
        if profile.param_bytes != param_bytes:
            book.register(dataclasses.replace(profile,
                                              param_bytes=param_bytes))
    return book


def scheduler_config(scenario):
    section = {
        k: v for k, v in scenario.data['scheduler'].items()
        if k != 'surcharge_per_branch'
    }
    ablation = scenario.data['ablation']
    return SchedulerConfig(
        placement_mode=ablation['placement'],
        kv_policy=ablation['kv_policy'],
        adaptive=ablation['adaptive'],
        speculation=ablation['speculation'],
        **section,
    )


def workload_apps(scenario, catalog):
    section = scenario.data['workload']
    apps = list(section.get('apps') or sorted(catalog.chains))
    unknown = [a for a in apps if a not in catalog.chains]
    if unknown:
        raise ConfigError(
            f"Aplicações sem modelo servido: {', '.join(unknown)}",
            errors={'workload.apps': ', '.join(unknown)},
        )
    return apps


def build_workload(scenario, catalog):
    """Chegadas do cenário: sintéticas, de traço ou de arquivo exportado."""
    section = scenario.data['workload']
    apps = workload_apps(scenario, catalog)
    lengths = {
        'prompt_range': tuple(section['prompt_range']),
        'output_range': tuple(section['output_range']),
        'max_sequence_length': section['max_sequence_length'],
        'shared_prefix_tokens': section['shared_prefix_tokens'],
        'seed': scenario.seed,
    }
    kind = section['kind']
    if kind == WorkloadKind.SYNTHETIC:
        return generate(WorkloadSpec(
            apps=apps,
            duration_s=section['duration_s'],
            total_requests=section['total_requests'],
            weights=list(section.get('weights') or []),
            **lengths,
        ))

    path = Path(scenario.section_dir('workload')) / section['path']
    if kind == WorkloadKind.TRACE:
        return replay(
            TraceSpec(
                path=str(path),
                duration_s=section['duration_s'],
                window_s=section['window_s'],
                min_qps=section['min_qps'],
                max_qps=section['max_qps'],
                mapping=section['mapping'],
                malformed_tolerance=section['malformed_tolerance'],
                **lengths,
            ),
            apps,
            section.get('weights'),
        )

    arrivals = load_arrivals(path, section['shared_prefix_tokens'])
    unknown = sorted({a.app_id for a in arrivals} - set(catalog.chains))
    if unknown:
        raise ConfigError(
            f"{path}: aplicações sem modelo servido",
            errors={'workload.path': ', '.join(unknown)},
        )
    return arrivals


def build_runtime(scenario):
    sim = Simulation(seed=scenario.seed,
                     event_budget=scenario.data.get('event_budget'))
    cluster = build_cluster(scenario)
    zoo = build_zoo(scenario)
    catalog = build_catalog(zoo, scenario.mode)
    profiles = build_profiles(scenario, zoo, catalog)
    scheduler = Scheduler(sim, cluster, catalog, profiles,
                          scheduler_config(scenario))
    arrivals = build_workload(scenario, catalog)
    return Runtime(scenario=scenario, sim=sim, cluster=cluster, zoo=zoo,
                   catalog=catalog, profiles=profiles, scheduler=scheduler,
                   arrivals=arrivals)


# ============================================================================
# EXECUÇÃO
# ============================================================================


@dataclass
class ScenarioResult:
    report: dict
    runtime: Runtime
    paths: dict = field(default_factory=dict)


def run_scenario(scenario, out_dir=None):
    """
    Roda o cenário até drenar e grava os artefatos quando há saída.

    Returns:
        ScenarioResult

    Raises:
        ConfigError: cenário inconsistente com os documentos de dados
        LiveLockError: orçamento de eventos excedido
    """
    runtime = build_runtime(scenario)
    until_s = scenario.data.get('until_s')
    until = int(until_s * US_PER_S) if until_s is not None else None
    report = runtime.scheduler.run(runtime.arrivals, until)
    report.update({
        'seed': scenario.seed,
        'ablation': dict(scenario.data['ablation']),
        'requests': len(runtime.arrivals),
        'workload_digest': workload_digest(runtime.arrivals),
        'config_digest': scenario.digest,
        'log_digest': runtime.sim.log_digest(),
    })
    result = ScenarioResult(report=report, runtime=runtime)
    out_dir = out_dir or scenario.data.get('out')
    if out_dir:
        result.paths = write_outputs(runtime.scheduler.metrics, report,
                                     runtime.cluster.device_ids, out_dir)
    logger.info(
        "Cenário concluído: %d de %d requisições, %.1f tokens/s",
        report['completed'], len(runtime.arrivals),
        report['throughput_tokens_per_s'],
    )
    return result


# ============================================================================
# RELATÓRIOS DO ZOOLÓGICO
# ============================================================================


def load_zoo_file(path):
    document = load_document(path)
    base_dir = document.pop('_base_dir')
    zoo, _ = load_zoo(document, base_dir)
    return zoo


def partition_report(zoo):
    report = zoo.to_dict()
    report['warnings'] = list(zoo.warnings)
    return report


def equivalence_report(zoo):
    return {
        'threshold': zoo.threshold,
        'edges': [
            {'a': a, 'b': b, 'score': round(score, 6)}
            for a, b, score in zoo.graph.edges
        ],
        'chain_equivalences': [
            [list(side) if isinstance(side, (list, tuple)) else side
             for side in entry]
            for entry in zoo.graph.chain_equivalences
        ],
        'warnings': list(zoo.graph.warnings),
    }


# ============================================================================
# COMPARAÇÃO
# ============================================================================

COMPARED = ('p50_us', 'p95_us', 'throughput_tokens_per_s', 'comm_fraction',
            'util_proxy')


def load_report(path):
    report = read_file(path)
    try:
        validate_document(report, REPORT_SCHEMA, str(path))
    except SchemaViolationError as exc:
        raise InvalidReportError(path, exc.path) from exc
    return report


def _metrics_of(report):
    latency = report['latency']
    return {
        'p50_us': latency.get('p50_us'),
        'p95_us': latency.get('p95_us'),
        'throughput_tokens_per_s': report['throughput_tokens_per_s'],
        'comm_fraction': report['comm_fraction'],
        'util_proxy': report['util_proxy']['mean'],
    }


def _ratio(value, reference):
    if value is None or reference is None:
        return None
    if reference == 0:
        return 1.0 if value == 0 else None
    return value / reference


def compare(reports):
    """
    Tabela lado a lado com razões em relação ao primeiro relatório.

    Args:
        reports: lista de (nome, relatório)

    Raises:
        NotEnoughReportsError: menos de dois relatórios
        DigestMismatchError: cargas diferentes
    """
    if len(reports) < 2:
        raise NotEnoughReportsError(len(reports))
    reference_name, reference = reports[0]
    expected = reference['workload_digest']
    for name, report in reports[1:]:
        if report['workload_digest'] != expected:
            raise DigestMismatchError(reference_name, name, expected,
                                      report['workload_digest'])
    base = _metrics_of(reference)
    rows = []
    for name, report in reports:
        values = _metrics_of(report)
        rows.append({
            'report': name,
            'mode': report.get('mode'),
            **values,
            'ratios': {
                metric: _ratio(values[metric], base[metric])
                for metric in COMPARED
            },
        })
    return {'workload_digest': expected, 'reference': reference_name,
            'rows': rows}
