import enum


class ModelKind(str, enum.Enum):
    HOVORKA = "hovorka"
    UVA_PADOVA = "uvapadova"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "").replace("/", "")
        for kind in cls:
            if kind.value == key:
                return kind
        if key in ("a", "modela"):
            return cls.HOVORKA
        if key in ("b", "modelb"):
            return cls.UVA_PADOVA
        raise ValueError(f"unknown model kind {value!r}")
