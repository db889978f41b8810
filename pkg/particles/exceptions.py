"""Исключения лаборатории и коды выхода CLI"""


class LabError(Exception):
    """Базовая ошибка лаборатории"""

    exit_code = 2

    def to_dict(self):
        return {'type': type(self).__name__, 'message': str(self), 'exit_code': self.exit_code}


class ConfigError(LabError):
    """Ошибка разбора или валидации конфигурации"""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        self.detail = message
        if field is not None:
            message = f'{field}: {message}'
        if line is not None:
            message = f'{message} (line {line})'
        super().__init__(message)

    def at_line(self, line):
        """Дописывает номер строки конфигурации, если он известен"""
        if line is not None and self.line is None:
            self.line = line
            self.args = (f'{self.args[0]} (line {line})',) + self.args[1:]
        return self


class UnsupportedDimensionError(ConfigError):
    """Размерность вне {2, 3}"""

    def __init__(self, d):
        self.d = d
        super().__init__(f'dimension {d} is not supported, expected 2 or 3', field='d')


class DegenerateInitialLawError(ConfigError):
    """Носитель начального закона лежит на прямой (нарушено H3)"""

    def __init__(self, eigenvalue, direction, tolerance):
        self.eigenvalue = float(eigenvalue)
        self.direction = [float(x) for x in direction]
        self.tolerance = float(tolerance)
        super().__init__(
            f'degenerate initial law: lambda_min={self.eigenvalue:.3e} <= {self.tolerance:.3e} '
            f'along direction {self.direction}',
            field='init',
        )


class NumericalBlowupError(LabError):
    """NaN/Inf в состоянии частиц"""

    exit_code = 3

    def __init__(self, message, step_index=None, t=None):
        self.step_index = step_index
        self.t = t
        if step_index is not None:
            message = f'{message} at step {step_index} (t={t})'
        super().__init__(message)


class NonPSDCovarianceError(NumericalBlowupError):
    """Ковариация с заметно отрицательным собственным значением"""


class AnalysisError(LabError):
    """Нарушены предусловия анализа"""
