"""
Exceções do escalonador global.
"""
from utils.commons.exceptions import SimulacaoException


class SchedulerException(SimulacaoException):
    """
    Exceção base para erros do escalonador.
    """


class NoFeasibleInstanceError(SchedulerException):
    """
    Nenhuma instância (existente ou nova) comporta o lote; o lote fica
    estacionado e é reenviado depois do recuo.
    """

    def __init__(self, block_id, members):
        super().__init__(
            message=(
                f"Nenhuma instância viável para o bloco {block_id} "
                f"({members} requisições)"
            ),
            error_code="SEM_INSTANCIA_VIAVEL",
            details={'block_id': block_id, 'membros': members}
        )


class InvalidSpeculationPlanError(SchedulerException):
    """
    Plano de especulação com passos adjacentes, passo final ou acima da
    cota.
    """

    def __init__(self, motivo, instance_ids):
        super().__init__(
            message=f"Plano de especulação inválido: {motivo}",
            error_code="PLANO_ESPECULACAO_INVALIDO",
            details={'motivo': motivo, 'instancias': list(instance_ids)}
        )
