import traceback


class SparseKException(Exception):
    """
    sparsekit 统一的 exception.
    CODE 同时也是命令行的退出码:
    1: 用法错误 (参数, 配置)
    2: 数值错误 / 检查失败
    3: IO 错误 (文件格式, 语料)
    """

    CODE: int = 2

    def __init__(self, message: str, at: str = "", e: Exception | None = None):
        self.message: str = message
        self.at = at
        self.stack_info = ""
        if e is not None:
            self.stack_info = "".join(traceback.format_exception(type(e), e, e.__traceback__))
        super().__init__(message)


class UsageException(SparseKException):
    """
    调用方式错误.
    """
    CODE: int = 1


class ArgumentException(UsageException):
    """
    参数不满足前置条件, 比如 k <= 0.
    """
    pass


class ConfigException(UsageException):
    """
    配置无法解析, 或者配置之间互相矛盾.
    """
    pass


class NumericException(SparseKException):
    """
    数值异常: NaN / Inf, 或者计算无法继续.
    """
    CODE: int = 2


class ShapeException(NumericException):
    pass


class EmptySupportException(NumericException):
    """
    softmax 的所有位置都被 mask 掉了.
    """
    pass


class EmptyStateException(NumericException):
    """
    stream 还没有任何输入时就去查询 mask.
    """
    pass


class TapeException(ShapeException):
    """
    backward 用的 tape 和 forward 不匹配.
    """
    pass


class TrainingDivergedException(NumericException):
    pass


class CheckFailedException(NumericException):
    """
    gradcheck 之类的检查超过了容忍度.
    """
    pass


class StorageException(SparseKException):
    """
    文件读写失败, magic / version 不对.
    """
    CODE: int = 3


class EmptyCorpusException(StorageException):
    pass
