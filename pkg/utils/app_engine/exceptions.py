"""
Exceções do núcleo de simulação a eventos discretos.
"""
from utils.commons.exceptions import SimulacaoException


class EngineException(SimulacaoException):
    """
    Exceção base para erros do motor de eventos.
    """


class PastEventError(EngineException):
    """
    Evento agendado para antes do relógio atual.
    """

    def __init__(self, fire_at, now):
        super().__init__(
            message=f"past event: fire_at={fire_at} < clock={now}",
            error_code="EVENTO_NO_PASSADO",
            details={'fire_at': fire_at, 'now': now}
        )


class LiveLockError(EngineException):
    """
    Orçamento de eventos excedido; a execução é abortada com diagnóstico.
    """

    exit_code = 3

    def __init__(self, budget, now, top_kinds):
        resumo = ', '.join(f"{kind}={count}" for kind, count in top_kinds)
        super().__init__(
            message=(
                f"live-lock: event budget {budget} exceeded at t={now}us "
                f"(recent kinds: {resumo})"
            ),
            error_code="LIVE_LOCK",
            details={
                'budget': budget,
                'now': now,
                'recent_kinds': dict(top_kinds),
            }
        )


class UnknownEventKindError(EngineException):
    """
    Evento sem handler registrado.
    """

    def __init__(self, kind):
        super().__init__(
            message=f"Nenhum handler registrado para o evento '{kind}'.",
            error_code="EVENTO_SEM_HANDLER",
            details={'kind': str(kind)}
        )
