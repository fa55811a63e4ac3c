from app_scenarios.management.commands._base import SimulationCommand
from app_scenarios.services import load_scenario, parse_ablation, run_scenario
from app_scheduler.models import ServingMode


class Command(SimulationCommand):
    help = (
        "Roda um cenário até drenar e grava report.json, latency_cdf.csv, "
        "timeseries.csv e decisions.log.\n"
        "Uso: python manage.py run --config config/testbed/scenario.json "
        "--seed 42 --out saida/ [--mode per-model] "
        "[--ablation kv_policy=recalc-only]"
    )

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True,
                            help='Documento de cenário (JSON ou YAML).')
        parser.add_argument('--seed', type=int, default=None,
                            help='Semente; sobrepõe a do cenário.')
        parser.add_argument('--out', default=None,
                            help='Pasta dos artefatos.')
        parser.add_argument('--mode', choices=ServingMode.values,
                            default=None, help='Modo de serviço.')
        parser.add_argument(
            '--ablation', action='append', default=[], metavar='K=V',
            help=('Chave de ablação (adaptive, kv_policy, speculation, '
                  'placement); pode repetir.')
        )

    def run(self, **options):
        scenario = load_scenario(
            options['config'],
            mode=options['mode'],
            seed=options['seed'],
            ablation=parse_ablation(options['ablation']),
            out=options['out'],
        )
        result = run_scenario(scenario)
        report = result.report
        if not result.paths:
            self.emit(report)
            return
        self.stdout.write(self.style.SUCCESS(
            f"{report['completed']} requisições concluídas, "
            f"{report['throughput_tokens_per_s']:.1f} tokens/s; "
            f"artefatos em {scenario.data['out']}"
        ))
