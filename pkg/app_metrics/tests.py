import csv
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from app_metrics.models import StepCategory
from app_metrics.services import (MetricsCollector, interval_union,
                                  percentile, write_outputs)
from utils.app_metrics.exceptions import EmptySamplesError


class PercentileTests(SimpleTestCase):
    """
    Testes do percentil por posto mais próximo.
    """

    def test_amostra_unica(self):
        self.assertEqual(percentile([10], 0.95), 10)

    def test_cem_valores(self):
        valores = list(range(1, 101))
        self.assertEqual(percentile(valores, 0.95), 95)
        self.assertEqual(percentile(valores, 0.50), 50)

    def test_vazia(self):
        with self.assertRaises(EmptySamplesError):
            percentile([], 0.5)

    def test_uniao_de_intervalos(self):
        self.assertEqual(interval_union([(0, 10), (5, 15), (20, 25)]), 20)
        self.assertEqual(interval_union([]), 0)


class CollectorTests(SimpleTestCase):
    """
    Testes do coletor e do relatório final.
    """

    def test_requisicao_so_computacao(self):
        coletor = MetricsCollector()
        coletor.arrival(0, 'r', 'a')
        coletor.interval('r', StepCategory.COMPUTE, 0, 10_000)
        coletor.tokens(10_000, 'r', 5)
        coletor.completion(10_000, 'r')
        relatorio = coletor.finalize(10_000, ['d0'])
        self.assertEqual(relatorio['latency']['p50_us'], 10_000)
        self.assertEqual(relatorio['latency']['p95_us'], 10_000)
        self.assertEqual(relatorio['comm_fraction'], 0.0)
        self.assertEqual(relatorio['throughput_tokens_per_s'], 500.0)

    def test_fracao_de_comunicacao(self):
        coletor = MetricsCollector()
        for request_id in ('a', 'b'):
            coletor.arrival(0, request_id, 'app')
        coletor.interval('a', StepCategory.TRANSFER, 0, 364)
        coletor.interval('a', StepCategory.COMPUTE, 364, 1000)
        coletor.completion(1000, 'a')
        coletor.interval('b', StepCategory.COMPUTE, 0, 1000)
        coletor.completion(1000, 'b')
        relatorio = coletor.finalize(1000, ['d0'])
        self.assertAlmostEqual(relatorio['comm_fraction'], 364 / 2000)

    def test_sobreposicao_contada_uma_vez(self):
        coletor = MetricsCollector()
        coletor.arrival(0, 'r', 'a')
        coletor.interval('r', StepCategory.TRANSFER, 0, 600)
        coletor.interval('r', StepCategory.LOAD, 100, 500)
        coletor.interval('r', StepCategory.COMPUTE, 600, 900)
        coletor.completion(1000, 'r')
        partes = coletor.decomposition(coletor.records['r'])
        self.assertEqual(partes['other'], 100)
        self.assertEqual(partes[StepCategory.TRANSFER], 600)

    def test_sem_concluidas(self):
        coletor = MetricsCollector()
        coletor.arrival(0, 'r', 'a')
        relatorio = coletor.finalize(1000, ['d0'])
        self.assertEqual(relatorio['completed'], 0)
        self.assertEqual(relatorio['in_flight'], 1)
        self.assertIsNone(relatorio['latency']['p95_us'])

    def test_ocupacao_limitada(self):
        coletor = MetricsCollector()
        coletor.device_busy('d0', 0, 600)
        coletor.device_busy('d0', 400, 800)
        coletor.device_busy('d1', 0, 100)
        relatorio = coletor.finalize(1000, ['d0', 'd1'])
        por_dispositivo = relatorio['util_proxy']['per_device']
        self.assertEqual(por_dispositivo, {'d0': 0.8, 'd1': 0.1})
        self.assertLessEqual(sum(por_dispositivo.values()), 2)

    def test_relatorio_reconstruido_do_log(self):
        coletor = MetricsCollector()
        coletor.arrival(0, 'r', 'a')
        coletor.flag(5, 'r', 'adaptive')
        coletor.interval('r', StepCategory.QUEUE, 0, 40)
        coletor.device_busy('d0', 40, 90)
        coletor.count(60, 'forwardings')
        coletor.memory_sample(50, 1000, 200)
        coletor.decision(70, 'scale up b0')
        coletor.tokens(90, 'r', 3)
        coletor.completion(90, 'r')
        refeito = MetricsCollector.from_log(coletor.facts)
        self.assertEqual(refeito.finalize(100, ['d0']),
                         coletor.finalize(100, ['d0']))
        self.assertEqual(refeito.finalize(100, ['d0'])['adaptive_requests'], 1)

    def test_arquivos_gravados(self):
        coletor = MetricsCollector()
        coletor.arrival(0, 'r', 'a')
        coletor.memory_sample(10, 5, 6)
        coletor.completion(20, 'r')
        relatorio = coletor.finalize(20, ['d0'])
        with tempfile.TemporaryDirectory() as tmp:
            caminhos = write_outputs(coletor, relatorio, ['d0'], tmp)
            with Path(caminhos['latency_cdf']).open() as handle:
                linhas = list(csv.reader(handle))
            self.assertEqual(linhas, [['latency_us', 'cum_fraction'],
                                      ['20', '1.000000']])
            self.assertTrue(Path(caminhos['report']).exists())
            serie = Path(caminhos['timeseries']).read_text().splitlines()
            self.assertEqual(serie[1], '10,0.0,5,6')
