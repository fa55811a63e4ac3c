import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from app_workload.models import MappingRule, TraceSpec, WorkloadSpec
from app_workload.services import (SmoothWeightedRoundRobin, export_arrivals,
                                   generate, largest_remainder, load_arrivals,
                                   map_rates, parse_trace, replay,
                                   workload_digest)
from utils.app_workload.exceptions import (EmptyWorkloadError,
                                           MalformedTraceError)


class GenerateTests(SimpleTestCase):
    """
    Testes da carga sintética Poisson.
    """

    def test_uma_requisicao(self):
        chegadas = generate(WorkloadSpec(apps=['a'], total_requests=1,
                                         duration_s=10))
        self.assertEqual(len(chegadas), 1)
        self.assertTrue(0 <= chegadas[0].arrival_us < 10_000_000)

    def test_maior_resto(self):
        self.assertEqual(largest_remainder([0.75, 0.25], 400), [300, 100])
        self.assertEqual(largest_remainder([1, 1, 1], 10), [4, 3, 3])

    def test_contagens_por_aplicacao(self):
        chegadas = generate(WorkloadSpec(apps=['a', 'b'],
                                         weights=[0.75, 0.25]))
        por_app = {'a': 0, 'b': 0}
        for chegada in chegadas:
            por_app[chegada.app_id] += 1
        self.assertEqual(por_app, {'a': 300, 'b': 100})

    def test_determinismo(self):
        spec = WorkloadSpec(app_count=5, seed=9)
        self.assertEqual(generate(spec), generate(spec))
        outra = generate(WorkloadSpec(app_count=5, seed=10))
        self.assertNotEqual(workload_digest(generate(spec)),
                            workload_digest(outra))

    def test_ordenada_e_dentro_da_janela(self):
        spec = WorkloadSpec(app_count=20, total_requests=400, seed=3)
        chegadas = generate(spec)
        self.assertEqual(len(chegadas), 400)
        tempos = [c.arrival_us for c in chegadas]
        self.assertEqual(tempos, sorted(tempos))
        self.assertTrue(all(0 <= t < 1_200_000_000 for t in tempos))
        for chegada in chegadas:
            self.assertLessEqual(
                chegada.prompt_tokens + chegada.output_tokens, 1024
            )
            self.assertEqual(chegada.prefix_tokens, 32)

    def test_sem_aplicacoes(self):
        with self.assertRaises(EmptyWorkloadError):
            generate(WorkloadSpec())


class ReplayTests(SimpleTestCase):
    """
    Testes da reprodução de traços.
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _traco(self, linhas):
        path = self.dir / 'trace.csv'
        path.write_text('\n'.join(linhas) + '\n')
        return path

    def test_mapa_linear(self):
        self.assertEqual(map_rates([10, 450], 1, 45), [1.0, 45.0])
        self.assertEqual(map_rates([7, 7], 1, 45), [23.0, 23.0])

    def test_taxa_constante(self):
        path = self._traco([str(1_600_000_000 + s) for s in range(180)])
        chegadas = replay(
            TraceSpec(path=str(path), duration_s=30), ['a', 'b']
        )
        self.assertEqual(len(chegadas), 3 * 230)
        tempos = [c.arrival_us for c in chegadas]
        intervalos = {b - a for a, b in zip(tempos, tempos[1:])}
        self.assertTrue(max(intervalos) - min(intervalos) <= 1)

    def test_round_robin_ponderado(self):
        rr = SmoothWeightedRoundRobin(['a', 'b'], [3, 1])
        self.assertEqual([rr.next() for _ in range(4)].count('a'), 3)

    def test_sorteio_ponderado_deterministico(self):
        path = self._traco(['0,5', '30,5', '90,50'])
        spec = TraceSpec(path=str(path), duration_s=10,
                         mapping=MappingRule.WEIGHTED_RANDOM, seed=4)
        self.assertEqual(replay(spec, ['a', 'b'], [1, 2]),
                         replay(spec, ['a', 'b'], [1, 2]))

    def test_arquivo_vazio(self):
        with self.assertRaises(EmptyWorkloadError):
            parse_trace(self._traco(['']))

    def test_linhas_mal_formadas(self):
        linhas = [str(i) for i in range(9)] + ['abc']
        with self.assertRaises(MalformedTraceError) as ctx:
            parse_trace(self._traco(linhas))
        self.assertEqual(ctx.exception.details['linhas'], [10])

    def test_tolerancia_de_um_por_cento(self):
        linhas = [f"{i},1" for i in range(200)] + ['1,2,3']
        self.assertEqual(len(parse_trace(self._traco(linhas))), 200)

    def test_arquivo_portavel(self):
        chegadas = generate(WorkloadSpec(app_count=3, total_requests=20))
        path = export_arrivals(chegadas, self.dir / 'arrivals.csv')
        self.assertEqual(workload_digest(load_arrivals(path)),
                         workload_digest(chegadas))
