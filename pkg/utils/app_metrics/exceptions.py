"""
Exceções da coleta de métricas.
"""
from utils.commons.exceptions import SimulacaoException


class MetricsException(SimulacaoException):
    """
    Exceção base para erros de métricas.
    """


class EmptySamplesError(MetricsException):
    """
    Percentil pedido sobre uma amostra vazia.
    """

    def __init__(self, metric='amostra'):
        super().__init__(
            message=f"Percentil indefinido: {metric} vazia",
            error_code="AMOSTRA_VAZIA",
            details={'metrica': metric}
        )


class UnknownFactError(MetricsException):
    """
    Fato do log de métricas com tipo desconhecido.
    """

    def __init__(self, kind):
        super().__init__(
            message=f"Tipo de fato desconhecido no log: {kind}",
            error_code="FATO_DESCONHECIDO",
            details={'tipo': kind}
        )
