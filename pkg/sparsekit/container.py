from __future__ import annotations

from abc import ABCMeta, abstractmethod
from typing import Dict, Generic, List, Type, TypeVar

from sparsekit.exceptions import UsageException

C = TypeVar("C")


class Provider(Generic[C], metaclass=ABCMeta):
    """
    为一个 contract 生产实例. 默认是单例: 第一次取用时创建, 之后缓存在注册它的容器里.
    """

    singleton: bool = True

    @abstractmethod
    def contract(self) -> Type[C]:
        pass

    @abstractmethod
    def factory(self, con: Container) -> C:
        pass


class Container:
    """
    一次运行的依赖表: RunOptions, RunConfig, Logger, Console 等.

    子命令只向容器要依赖, 不关心它们怎么来的.
    查找顺序: 自己的实例 -> 自己的 provider -> 父容器.
    demo 为每次调用开一个子容器, 子容器的绑定不会写回父容器.
    """

    def __init__(self, parent: Container | None = None, name: str = "run"):
        if parent is not None and not isinstance(parent, Container):
            raise UsageException(f"container parent must be a Container, got {type(parent).__name__}")
        self.parent = parent
        self.name = name
        self._instances: Dict[type, object] = {}
        self._providers: Dict[type, Provider] = {}

    def set(self, contract: Type[C], instance: C) -> None:
        self._instances[contract] = instance

    def register(self, *providers: Provider) -> None:
        """
        a provider replaces whatever instance was bound to its contract.
        """
        for provider in providers:
            contract = provider.contract()
            self._instances.pop(contract, None)
            self._providers[contract] = provider

    def bound(self, contract: type) -> bool:
        if contract in self._instances or contract in self._providers:
            return True
        return self.parent is not None and self.parent.bound(contract)

    def get(self, contract: Type[C]) -> C | None:
        if contract in self._instances:
            return self._instances[contract]
        provider = self._providers.get(contract)
        if provider is not None:
            made = provider.factory(self)
            if provider.singleton:
                self._instances[contract] = made
            return made
        if self.parent is not None:
            return self.parent.get(contract)
        return None

    def fetch(self, contract: Type[C]) -> C | None:
        """
        like get, but an instance of the wrong type counts as missing.
        """
        got = self.get(contract)
        if got is None or not isinstance(got, contract):
            return None
        return got

    def force_fetch(self, contract: Type[C]) -> C:
        got = self.get(contract)
        if got is None:
            raise UsageException(f"{contract.__name__} is not bound in container {self.name}",
                                 at=", ".join(self.contracts()))
        if not isinstance(got, contract):
            raise UsageException(f"{contract.__name__} is bound to a {type(got).__name__} in container {self.name}")
        return got

    def contracts(self) -> List[str]:
        names = {c.__name__ for c in self._instances} | {c.__name__ for c in self._providers}
        if self.parent is not None:
            names.update(self.parent.contracts())
        return sorted(names)
