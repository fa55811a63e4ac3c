import json
import tempfile
import time
from io import StringIO
from pathlib import Path

from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from app_scenarios.services import (apply_overrides, build_catalog,
                                    build_profiles, build_scenario,
                                    build_workload, build_zoo, compare,
                                    load_scenario, parse_ablation,
                                    run_scenario)
from utils.app_scenarios.exceptions import (DigestMismatchError,
                                            NotEnoughReportsError)
from utils.commons.exceptions import ConfigError

GRADE = {'batches': [1, 32], 'lengths': [1, 1024]}


def documento_cenario(**extra):
    documento = {
        'schema_version': 1,
        'mode': 'block',
        'seed': 42,
        'cluster': {
            'device_classes': {
                'g': {'mem_capacity_gb': 8, 'mem_bandwidth_gbps': 1000,
                      'store_bandwidth_gbps': 10},
            },
            'servers': [
                {'id': 's0', 'intra_bandwidth_gbps': 100,
                 'device_class': 'g', 'device_count': 2},
                {'id': 's1', 'intra_bandwidth_gbps': 100,
                 'device_class': 'g', 'device_count': 2},
            ],
            'inter_server_bandwidth_gbit': 100,
        },
        'zoo': {
            'foundations': [{
                'id': 'base', 'layers': 4, 'embed_dim': 64,
                'bytes': {'embedding': 10 ** 8, 'attention': 5 * 10 ** 7,
                          'ffn': 10 ** 8, 'lm_head': 10 ** 8},
            }],
            'models': [
                {'id': 'app-a', 'foundation': 'base', 'tuning_kind': 'lora',
                 'adapters': [{'layer': 1, 'slot': 'attention',
                               'mode': 'parallel', 'param_bytes': 10 ** 6}]},
                {'id': 'app-b', 'foundation': 'base',
                 'tuning_kind': 'adapter',
                 'adapters': [{'layer': 2, 'slot': 'ffn', 'mode': 'serial',
                               'param_bytes': 2 * 10 ** 6}]},
            ],
        },
        'profiles': {
            'templates': {
                'camada': {
                    'layer_param_bytes': 1.5e8,
                    'prefill': {**GRADE, 'us': [[2000, 20000],
                                                [8000, 60000]]},
                    'decode': {**GRADE, 'us': [[500, 800], [1500, 2500]]},
                },
            },
            'surrogates': {'single_layer': 20, 'multi_layer': 10,
                           'acceptance': 0.8},
            'stitch': {
                'prefill': {**GRADE, 'us': [[50, 100], [100, 200]]},
                'decode': {**GRADE, 'us': [[10, 20], [20, 40]]},
            },
        },
        'workload': {
            'kind': 'synthetic', 'duration_s': 20, 'total_requests': 12,
            'prompt_range': [16, 64], 'output_range': [4, 12],
            'shared_prefix_tokens': 8,
        },
        'scheduler': {'review_period_s': 5, 'kv_review_period_s': 5,
                      'metrics_tick_s': 1},
    }
    for chave, valor in extra.items():
        if isinstance(valor, dict) and isinstance(documento.get(chave), dict):
            documento[chave] = {**documento[chave], **valor}
        else:
            documento[chave] = valor
    return documento


def cenario(**extra):
    return build_scenario(documento_cenario(**extra))


def rodar(**extra):
    return run_scenario(cenario(**extra)).report


class ScenarioValidationTests(SimpleTestCase):
    """
    Testes da validação do documento de cenário.
    """

    def test_padroes_preenchidos(self):
        dados = cenario().data
        self.assertEqual(dados['ablation']['kv_policy'], 'best-effort')
        self.assertEqual(dados['ablation']['speculation'], 'off')
        self.assertTrue(dados['ablation']['adaptive'])
        self.assertEqual(dados['workload']['max_sequence_length'], 1024)

    def test_adaptativo_desligado_fora_do_modo_block(self):
        dados = cenario(mode='per-model').data
        self.assertFalse(dados['ablation']['adaptive'])

    def test_adaptativo_conflita_com_per_model(self):
        with self.assertRaises(ConfigError) as ctx:
            cenario(mode='per-model', ablation={'adaptive': True})
        self.assertIn('ablation.adaptive', ctx.exception.errors)

    def test_especulacao_conflita_com_param_share(self):
        with self.assertRaises(ConfigError) as ctx:
            cenario(mode='param-share', ablation={'speculation': 'on'})
        self.assertIn('ablation.speculation', ctx.exception.errors)

    def test_politica_desconhecida(self):
        with self.assertRaises(ConfigError) as ctx:
            cenario(ablation={'kv_policy': 'copia-magica'})
        self.assertIn('ablation.kv_policy', ctx.exception.errors)

    def test_traco_sem_caminho(self):
        with self.assertRaises(ConfigError) as ctx:
            cenario(workload={'kind': 'trace'})
        self.assertIn('workload.path', ctx.exception.errors)

    def test_faixa_invertida(self):
        with self.assertRaises(ConfigError) as ctx:
            cenario(workload={'prompt_range': [64, 16]})
        self.assertIn('workload.prompt_range', ctx.exception.errors)

    def test_fracao_fora_do_intervalo(self):
        with self.assertRaises(ConfigError) as ctx:
            cenario(scheduler={'scale_threshold': 1.5})
        self.assertIn('scheduler.scale_threshold', ctx.exception.errors)

    def test_secao_com_tipo_errado(self):
        with self.assertRaises(ConfigError):
            cenario(zoo=[1, 2])

    def test_aplicacao_desconhecida(self):
        dados = cenario(workload={'apps': ['app-a', 'nenhum']})
        catalogo = build_catalog(build_zoo(dados), dados.mode)
        with self.assertRaises(ConfigError) as ctx:
            build_workload(dados, catalogo)
        self.assertIn('workload.apps', ctx.exception.errors)

    def test_ablacao_da_linha_de_comando(self):
        self.assertEqual(
            parse_ablation(['kv-policy=recalc-only', 'adaptive=off']),
            {'kv_policy': 'recalc-only', 'adaptive': 'off'},
        )
        with self.assertRaises(ConfigError):
            parse_ablation(['velocidade=alta'])
        with self.assertRaises(ConfigError):
            parse_ablation(['adaptive'])

    def test_digest_ignora_a_saida(self):
        self.assertEqual(cenario().digest, cenario(out='/tmp/x').digest)
        self.assertNotEqual(cenario().digest, cenario(seed=7).digest)

    def test_modo_de_referencia_desliga_especulacao_herdada(self):
        documento = apply_overrides(
            {'mode': 'block', 'ablation': {'speculation': 'on',
                                           'kv_policy': 'recalc-only'}},
            mode='param-share',
        )
        self.assertEqual(documento['mode'], 'param-share')
        self.assertEqual(documento['ablation']['speculation'], 'off')
        self.assertFalse(documento['ablation']['adaptive'])
        self.assertEqual(documento['ablation']['kv_policy'], 'recalc-only')

    def test_linha_de_comando_vence_o_desligamento(self):
        documento = apply_overrides({'mode': 'block'}, mode='per-model',
                                    ablation={'adaptive': True})
        self.assertTrue(documento['ablation']['adaptive'])


class BuildRuntimeTests(SimpleTestCase):
    """
    Testes da montagem de catálogo e perfis por modo.
    """

    def test_perfis_para_toda_cadeia(self):
        for modo in ('block', 'per-model', 'param-share'):
            dados = cenario(mode=modo)
            zoo = build_zoo(dados)
            catalogo = build_catalog(zoo, modo)
            livro = build_profiles(dados, zoo, catalogo)
            for cadeia in catalogo.chains.values():
                for bloco in cadeia:
                    self.assertIn(bloco, livro)

    def test_param_share_reserva_todos_os_ramos(self):
        dados = cenario(mode='param-share')
        zoo = build_zoo(dados)
        catalogo = build_catalog(zoo, 'param-share')
        livro = build_profiles(dados, zoo, catalogo)
        self.assertEqual(livro.profile('ps:base').param_bytes,
                         catalogo.block('ps:base').param_bytes)
        self.assertEqual(livro.profile('ps:base').branches, 2)

    def test_chegadas_dentro_da_janela(self):
        dados = cenario()
        chegadas = build_workload(dados,
                                  build_catalog(build_zoo(dados), 'block'))
        self.assertEqual(len(chegadas), 12)
        self.assertTrue(all(0 <= a.arrival_us < 20_000_000
                            for a in chegadas))


class RunScenarioTests(SimpleTestCase):
    """
    Testes de execução ponta a ponta de cenários pequenos.
    """

    def test_mesma_semente_mesmo_relatorio(self):
        primeiro = json.dumps(rodar(), sort_keys=True, default=str)
        segundo = json.dumps(rodar(), sort_keys=True, default=str)
        self.assertEqual(primeiro, segundo)

    def test_drena_todas_as_requisicoes(self):
        resultado = run_scenario(cenario())
        self.assertEqual(resultado.report['completed'], 12)
        self.assertEqual(resultado.report['in_flight'], 0)
        resultado.runtime.scheduler.assert_drained()

    def test_per_model_sem_servico_adaptativo(self):
        relatorio = rodar(mode='per-model')
        self.assertEqual(relatorio['adaptive_requests'], 0)
        self.assertEqual(relatorio['counters']['adaptive'], 0)
        self.assertEqual(relatorio['mode'], 'per-model')

    def test_recalc_only_sem_bytes_copiados(self):
        relatorio = rodar(ablation={'kv_policy': 'recalc-only'})
        self.assertEqual(relatorio['counters']['kv_copy_bytes'], 0)

    def test_param_share_drena(self):
        relatorio = rodar(mode='param-share')
        self.assertEqual(relatorio['completed'], 12)

    def test_especulacao_ideal_drena(self):
        relatorio = rodar(ablation={'speculation': 'ideal'})
        self.assertEqual(relatorio['completed'], 12)

    def test_relatorio_com_digests(self):
        relatorio = rodar()
        self.assertEqual(len(relatorio['workload_digest']), 64)
        self.assertEqual(relatorio['config_digest'], cenario().digest)
        self.assertEqual(relatorio['requests'], 12)

    def test_artefatos_gravados(self):
        with tempfile.TemporaryDirectory() as pasta:
            resultado = run_scenario(cenario(), out_dir=pasta)
            nomes = sorted(Path(p).name for p in resultado.paths.values())
            self.assertEqual(nomes, ['decisions.log', 'latency_cdf.csv',
                                     'report.json', 'timeseries.csv'])
            gravado = json.loads(Path(pasta, 'report.json').read_text())
            self.assertEqual(gravado['completed'], 12)
            for linha in Path(pasta, 'decisions.log').read_text() \
                    .splitlines():
                self.assertIn('action', json.loads(linha))


class CompareTests(SimpleTestCase):
    """
    Testes da comparação entre relatórios.
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.relatorio = rodar()

    def test_relatorio_contra_si_mesmo(self):
        tabela = compare([('a', self.relatorio), ('b', self.relatorio)])
        for linha in tabela['rows']:
            for razao in linha['ratios'].values():
                self.assertEqual(razao, 1.0)

    def test_digest_divergente(self):
        outro = dict(self.relatorio, workload_digest='0' * 64)
        with self.assertRaises(DigestMismatchError):
            compare([('a', self.relatorio), ('b', outro)])

    def test_um_relatorio_so(self):
        with self.assertRaises(NotEnoughReportsError):
            compare([('a', self.relatorio)])

    def test_razao_de_throughput(self):
        dobro = dict(
            self.relatorio,
            throughput_tokens_per_s=2 * self.relatorio[
                'throughput_tokens_per_s'],
        )
        tabela = compare([('a', self.relatorio), ('b', dobro)])
        self.assertAlmostEqual(
            tabela['rows'][1]['ratios']['throughput_tokens_per_s'], 2.0
        )


class CommandTests(SimpleTestCase):
    """
    Testes dos comandos de gerenciamento e dos códigos de saída.
    """

    def setUp(self):
        self.pasta = tempfile.TemporaryDirectory()
        self.addCleanup(self.pasta.cleanup)
        self.raiz = Path(self.pasta.name)

    def escrever(self, nome, documento):
        caminho = self.raiz / nome
        caminho.write_text(json.dumps(documento))
        return str(caminho)

    def test_run_grava_artefatos(self):
        config = self.escrever('cenario.json', documento_cenario())
        saida = self.raiz / 'saida'
        call_command('run', config=config, out=str(saida), stdout=StringIO())
        self.assertTrue((saida / 'report.json').exists())
        self.assertTrue((saida / 'timeseries.csv').exists())

    def test_run_com_include_e_secao_em_arquivo(self):
        documento = documento_cenario()
        documento.pop('mode')
        zoo = self.escrever('zoo.json', documento.pop('zoo'))
        self.escrever('base.json', {'mode': 'per-model', 'seed': 1})
        documento.update({'include': ['base.json'], 'zoo': Path(zoo).name})
        config = self.escrever('cenario.json', documento)
        saida = StringIO()
        call_command('run', config=config, stdout=saida)
        relatorio = json.loads(saida.getvalue())
        # o próprio documento vence o include
        self.assertEqual(relatorio['seed'], 42)
        self.assertEqual(relatorio['mode'], 'per-model')

    def test_conflito_sai_com_codigo_2(self):
        config = self.escrever('cenario.json', documento_cenario())
        with self.assertRaises(CommandError) as ctx:
            call_command('run', config=config, mode='per-model',
                         ablation=['adaptive=on'], stdout=StringIO(),
                         stderr=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)

    def test_modo_per_model_sobre_documento_com_especulacao(self):
        documento = documento_cenario(ablation={'speculation': 'on'})
        config = self.escrever('cenario.json', documento)
        saida = StringIO()
        call_command('run', config=config, mode='per-model', stdout=saida,
                     stderr=StringIO())
        relatorio = json.loads(saida.getvalue())
        self.assertEqual(relatorio['mode'], 'per-model')
        self.assertEqual(relatorio['ablation']['speculation'], 'off')
        self.assertEqual(relatorio['completed'], 12)

    def test_arquivo_ausente_sai_com_codigo_2(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('run', config=str(self.raiz / 'nada.json'),
                         stdout=StringIO(), stderr=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)

    def test_orcamento_de_eventos_sai_com_codigo_3(self):
        config = self.escrever('cenario.json',
                               documento_cenario(event_budget=50))
        with self.assertRaises(CommandError) as ctx:
            call_command('run', config=config, stdout=StringIO(),
                         stderr=StringIO())
        self.assertEqual(ctx.exception.returncode, 3)

    def test_compare_de_relatorios_gravados(self):
        relatorio = self.escrever('report.json', rodar())
        saida = StringIO()
        call_command('compare', relatorio, relatorio, stdout=saida)
        tabela = json.loads(saida.getvalue())
        self.assertEqual(len(tabela['rows']), 2)

    def test_compare_digest_divergente_sai_com_codigo_2(self):
        relatorio = rodar()
        a = self.escrever('a.json', relatorio)
        b = self.escrever('b.json', dict(relatorio, workload_digest='f' * 64))
        with self.assertRaises(CommandError) as ctx:
            call_command('compare', a, b, stdout=StringIO(),
                         stderr=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)

    def test_partition_equiv_redundancy(self):
        zoo = self.escrever('zoo.json', documento_cenario()['zoo'])
        saida = StringIO()
        call_command('partition', zoo=zoo, stdout=saida)
        particao = json.loads(saida.getvalue())
        self.assertEqual({m['id'] for m in particao['models']},
                         {'base', 'app-a', 'app-b'})

        saida = StringIO()
        call_command('equiv', zoo=zoo, stdout=saida)
        self.assertIn('edges', json.loads(saida.getvalue()))

        saida = StringIO()
        call_command('redundancy', zoo=zoo, models='app-a,app-b',
                     stdout=saida)
        redundancia = json.loads(saida.getvalue())
        self.assertGreater(redundancia['redundancy_fraction'], 0.4)

    def test_gerar_workload_reproduz_a_carga(self):
        config = self.escrever('cenario.json', documento_cenario())
        destino = self.raiz / 'chegadas.csv'
        call_command('gerar_workload', config=config, out=str(destino),
                     stdout=StringIO())
        documento = documento_cenario(workload={
            'kind': 'arrivals', 'path': str(destino),
        })
        exportado = rodar(**{'workload': documento['workload']})
        original = rodar()
        self.assertEqual(exportado['workload_digest'],
                         original['workload_digest'])


def testbed(nome, **overrides):
    return load_scenario(Path(settings.TESTBED_DIR) / nome, **overrides)


def vazao(relatorio):
    return relatorio['throughput_tokens_per_s']


def p95(relatorio):
    return relatorio['latency']['p95_us']


class TestbedServingModesTests(SimpleTestCase):
    """
    Testes do testbed entregue: modo por blocos contra os modos de
    referência e contra o próprio modo sem serviço adaptativo.
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        inicio = time.monotonic()
        cls.bloco = run_scenario(testbed('scenario.json')).report
        cls.duracao_bloco = time.monotonic() - inicio
        cls.por_modelo = run_scenario(
            testbed('scenario-per-model.yaml')).report
        cls.param_share = run_scenario(
            testbed('scenario-param-share.yaml')).report
        cls.sem_adaptativo = run_scenario(
            testbed('scenario-no-adaptive.yaml')).report

    def test_mesma_carga_nos_quatro_modos(self):
        digest = self.bloco['workload_digest']
        for relatorio in (self.por_modelo, self.param_share,
                          self.sem_adaptativo):
            self.assertEqual(relatorio['workload_digest'], digest)

    def test_todos_drenam(self):
        for relatorio in (self.bloco, self.por_modelo, self.param_share,
                          self.sem_adaptativo):
            self.assertEqual(relatorio['in_flight'], 0)
            self.assertEqual(relatorio['completed'], relatorio['requests'])

    def test_vazao_contra_um_motor_por_modelo(self):
        self.assertGreaterEqual(vazao(self.bloco),
                                1.3 * vazao(self.por_modelo))

    def test_p95_contra_um_motor_por_modelo(self):
        self.assertLessEqual(p95(self.bloco), 0.8 * p95(self.por_modelo))

    def test_vazao_contra_compartilhamento_de_parametros(self):
        self.assertGreaterEqual(vazao(self.bloco),
                                1.2 * vazao(self.param_share))

    def test_sem_adaptativo_piora(self):
        self.assertEqual(self.sem_adaptativo['counters']['adaptive'], 0)
        self.assertGreater(self.bloco['counters']['adaptive'], 0)
        self.assertGreater(p95(self.sem_adaptativo), p95(self.bloco))
        self.assertLess(vazao(self.sem_adaptativo), vazao(self.bloco))

    def test_modo_por_blocos_escala(self):
        self.assertGreater(self.bloco['counters']['scale_actions'], 0)

    def test_tempo_de_execucao(self):
        self.assertLess(self.duracao_bloco, 60)


class LocalityAblationTests(SimpleTestCase):
    """
    Testes do posicionamento por localidade contra frag-min numa carga
    em que cada cadeia cabe inteira num servidor.
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.localidade = run_scenario(
            testbed('scenario-locality.json')).report
        cls.frag_min = run_scenario(testbed(
            'scenario-locality.json', ablation={'placement': 'frag-min'}
        )).report

    def test_frag_min_separa_as_cadeias(self):
        self.assertGreater(
            self.frag_min['counters']['inter_server_forwardings'], 0
        )

    def test_localidade_corta_encaminhamentos_entre_servidores(self):
        self.assertLessEqual(
            self.localidade['counters']['inter_server_forwardings'],
            0.5 * self.frag_min['counters']['inter_server_forwardings'],
        )

    def test_ambos_drenam(self):
        for relatorio in (self.localidade, self.frag_min):
            self.assertEqual(relatorio['completed'], 40)


class KvPolicyAblationTests(SimpleTestCase):
    """
    Testes das políticas de KV num servidor carregado em que o dono do KV
    fica para trás e o decode é redespachado.
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.relatorios = {
            politica: run_scenario(testbed(
                'scenario-kv.json', ablation={'kv_policy': politica}
            )).report
            for politica in ('best-effort', 'recalc-only', 'least-busy')
        }

    def contador(self, politica, nome):
        return self.relatorios[politica]['counters'][nome]

    def test_best_effort_migra(self):
        self.assertGreater(self.contador('best-effort', 'migrations'), 0)
        self.assertGreater(self.contador('best-effort', 'kv_copy_bytes'), 0)

    def test_recalc_only_copia_menos_da_metade(self):
        self.assertLess(self.contador('recalc-only', 'kv_copy_bytes'),
                        0.5 * self.contador('best-effort', 'kv_copy_bytes'))

    def test_recalc_only_piora_o_p95(self):
        self.assertGreaterEqual(p95(self.relatorios['recalc-only']),
                                p95(self.relatorios['best-effort']))

    def test_least_busy_ignora_o_dono(self):
        self.assertGreater(self.contador('least-busy', 'migrations'), 0)

    def test_todas_drenam(self):
        for relatorio in self.relatorios.values():
            self.assertEqual(relatorio['completed'], 200)
            self.assertEqual(relatorio['in_flight'], 0)
