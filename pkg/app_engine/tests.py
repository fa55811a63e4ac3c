from django.test import SimpleTestCase

from app_engine.models import EventKind
from app_engine.services import Simulation, make_rng
from utils.app_engine.exceptions import LiveLockError, PastEventError


class SimulationTests(SimpleTestCase):
    """
    Testes do motor de eventos discretos.

    Abrange:
    - Ordenação por (fire_at, seq) e desempate pela sequência
    - Rejeição de eventos no passado
    - Detecção de live-lock pelo orçamento de eventos
    - Determinismo do log e independência dos streams aleatórios
    """

    def setUp(self):
        self.sim = Simulation(seed=7)
        self.vistos = []
        self.sim.on(EventKind.CUSTOM, lambda e: self.vistos.append(e.payload))

    def test_fila_vazia_drena_em_zero(self):
        """Fila vazia em modo drenagem retorna o relógio 0."""
        self.assertEqual(Simulation().run(), 0)

    def test_evento_em_t0_aceito(self):
        self.sim.at(0, EventKind.CUSTOM, 'a')
        self.assertEqual(self.sim.run(), 0)
        self.assertEqual(self.vistos, ['a'])

    def test_ordem_por_instante(self):
        """Eventos em 3, 1, 2 são processados como 1, 2, 3."""
        for t in (3, 1, 2):
            self.sim.at(t, EventKind.CUSTOM, t)
        self.assertEqual(self.sim.run(), 3)
        self.assertEqual(self.vistos, [1, 2, 3])

    def test_empate_respeita_sequencia(self):
        for nome in ('primeiro', 'segundo', 'terceiro'):
            self.sim.at(5, EventKind.CUSTOM, nome)
        self.sim.run()
        self.assertEqual(self.vistos, ['primeiro', 'segundo', 'terceiro'])

    def test_evento_no_passado_rejeitado(self):
        """Agendar em t=5 com relógio em 10 gera erro."""
        self.sim.at(10, EventKind.CUSTOM, 'x')
        self.sim.run()
        with self.assertRaises(PastEventError) as ctx:
            self.sim.at(5, EventKind.CUSTOM, 'y')
        self.assertIn('past event', ctx.exception.message)

    def test_cancelamento(self):
        handle = self.sim.at(4, EventKind.CUSTOM, 'cancelado')
        self.sim.at(6, EventKind.CUSTOM, 'mantido')
        self.sim.cancel(handle)
        self.sim.run()
        self.assertEqual(self.vistos, ['mantido'])
        self.assertTrue(handle.cancelled)

    def test_run_ate_limite(self):
        self.sim.at(10, EventKind.CUSTOM, 'a')
        self.sim.at(30, EventKind.CUSTOM, 'b')
        self.assertEqual(self.sim.run(until=20), 20)
        self.assertEqual(self.vistos, ['a'])
        self.assertEqual(self.sim.run(), 30)

    def test_live_lock_abortado(self):
        """Evento que se reagenda indefinidamente estoura o orçamento."""
        sim = Simulation(event_budget=1000)
        sim.on(EventKind.RETRY, lambda e: sim.after(1, EventKind.RETRY))
        sim.at(0, EventKind.RETRY)
        with self.assertRaises(LiveLockError) as ctx:
            sim.run()
        self.assertEqual(sim.processed, 1001)
        self.assertEqual(ctx.exception.exit_code, 3)
        self.assertIn('retry', ctx.exception.details['recent_kinds'])

    def test_log_ordenado_em_execucoes_aleatorias(self):
        """
        Propriedade: o log é estritamente ordenado por (fire_at, seq)
        em 1.000 execuções com eventos aleatórios e reagendamentos.
        """
        rng = make_rng(2024, 'test-engine-order')
        for _ in range(1000):
            sim = Simulation(seed=int(rng.integers(0, 2**31)))

            def handler(event, sim=sim):
                if event.payload and event.payload > 0:
                    delay = int(sim.rng('x').integers(0, 5))
                    sim.after(delay, EventKind.CUSTOM, event.payload - 1)

            sim.on(EventKind.CUSTOM, handler)
            for t in rng.integers(0, 50, size=int(rng.integers(1, 12))):
                sim.at(int(t), EventKind.CUSTOM, int(rng.integers(0, 3)))
            sim.run()
            chaves = [(e.fire_at, e.seq) for e in sim.run_log]
            self.assertTrue(
                all(a < b for a, b in zip(chaves, chaves[1:]))
            )

    def test_replay_identico(self):
        """Mesma semente e mesmo roteiro produzem o mesmo log."""
        def roteiro(seed):
            sim = Simulation(seed=seed)

            def handler(event):
                if event.payload < 20:
                    gap = int(sim.rng('gaps').integers(1, 100))
                    sim.after(gap, EventKind.CUSTOM, event.payload + 1)

            sim.on(EventKind.CUSTOM, handler)
            sim.at(0, EventKind.CUSTOM, 0)
            sim.run()
            return sim.log_digest()

        self.assertEqual(roteiro(42), roteiro(42))
        self.assertNotEqual(roteiro(42), roteiro(43))

    def test_streams_independentes(self):
        """Consumir um stream não altera as retiradas de outro."""
        a = Simulation(seed=1)
        b = Simulation(seed=1)
        a.rng('workload').random(100)
        self.assertEqual(
            a.rng('surrogate-acceptance').random(5).tolist(),
            b.rng('surrogate-acceptance').random(5).tolist(),
        )

    def test_lotes_numerados_por_execucao(self):
        outra = Simulation(seed=7)
        self.assertEqual([self.sim.next_batch_id() for _ in range(3)],
                         [0, 1, 2])
        self.assertEqual(outra.next_batch_id(), 0)
