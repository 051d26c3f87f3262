"""Run configuration and ``key=value`` override parsing."""

import ast
import math
from dataclasses import asdict, dataclass, field

from ..errors import ConfigurationError

EXPERIMENTS = ("fig2_likvar", "table2_nongauss", "table3_cloud", "table4_lorenz", "custom")
SUBCOMMANDS = {
    "fig2": "fig2_likvar",
    "table2": "table2_nongauss",
    "table3": "table3_cloud",
    "table4": "table4_lorenz",
    "custom": "custom",
}


def parse_value(text):
    """Python literal when possible (numbers, tuples, booleans), otherwise the raw string."""
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        return text


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        k = k.strip()
        if not k:
            raise ConfigurationError(f"override {item!r} has an empty key")
        out[k] = parse_value(v.strip())
    return out


def read_override_file(path):
    lines = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                lines.append(line)
    return parse_overrides(lines)


@dataclass
class RunConfig:
    experiment: str
    seed: int = 0
    scale: float = 0.2
    overrides: dict = field(default_factory=dict)
    out: str = "runs"
    workers: int = 1
    data: str = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")
        if not self.scale > 0:
            raise ConfigurationError("scale must be positive")
        if int(self.workers) < 1:
            raise ConfigurationError("workers must be >= 1")
        self.seed = int(self.seed)
        self.workers = int(self.workers)

    def get(self, key, default):
        return self.overrides.get(key, default)

    def reps(self, key, full_count, minimum=1):
        """Replication count: an explicit override, or ``scale`` times the full count."""
        if key in self.overrides:
            return int(self.overrides[key])
        return max(minimum, int(math.ceil(self.scale * full_count)))

    def to_dict(self):
        return asdict(self)
