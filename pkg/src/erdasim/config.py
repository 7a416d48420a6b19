"""Store geometry and the key=value run-config file format."""

from __future__ import annotations

from dataclasses import dataclass, replace


def _align64(n: int) -> int:
    return (n + 63) & ~63


@dataclass(frozen=True)
class Geometry:
    """Durable layout of one store device.

    Offsets are derived, never stored: a server and a freshly loaded
    image agree on the layout as long as they share the same geometry.
    """

    heads: int = 4
    table_slots: int = 4096          # power of two
    neighborhood: int = 32           # hopscotch H
    region_size: int = 1 << 20
    segment_size: int = 64 << 10
    region_count: int = 64
    max_object: int = 4096           # read-window size for one-sided gets
    max_key: int = 16
    clean_threshold: float = 0.75    # chain occupancy that triggers cleaning; >1 disables
    retry_limit: int = 3             # client re-reads before old-version fallback

    def __post_init__(self):
        if self.table_slots & (self.table_slots - 1):
            raise ValueError("table_slots must be a power of two")
        if self.segment_size > self.region_size or self.region_size % self.segment_size:
            raise ValueError("region_size must be a multiple of segment_size")
        if self.max_object > self.segment_size:
            raise ValueError("max_object cannot exceed segment_size")
        if not (1 <= self.heads <= 8):
            raise ValueError("heads must be in 1..8")

    # ---- derived device layout ----

    @property
    def clean_word_off(self) -> int:
        return 64                    # one 8-byte word: cleaning phase record

    @property
    def epoch_word_off(self) -> int:
        return 72                    # one epoch byte per head, single atomic word

    @property
    def region_table_off(self) -> int:
        return 80

    @property
    def table_base(self) -> int:
        return _align64(self.region_table_off + 4 * self.region_count)

    @property
    def table_entries(self) -> int:
        # trailing H-1 physical slots keep neighborhoods from wrapping
        return self.table_slots + self.neighborhood - 1

    @property
    def regions_base(self) -> int:
        return _align64(self.table_base + 32 * self.table_entries)

    @property
    def capacity(self) -> int:
        return self.regions_base + self.region_count * self.region_size

    def region_base(self, region_id: int) -> int:
        if not 0 <= region_id < self.region_count:
            raise ValueError(f"region id {region_id} out of range")
        return self.regions_base + region_id * self.region_size


#: small geometry for exhaustive crash enumeration and cleaning tests
def small_geometry(**overrides) -> Geometry:
    base = Geometry(
        heads=2,
        table_slots=64,
        region_size=64 << 10,
        segment_size=8 << 10,
        region_count=8,
        max_object=1 << 10,
        clean_threshold=2.0,
    )
    return replace(base, **overrides) if overrides else base


def parse_config(text: str) -> dict[str, str]:
    """Parse the run-config format: one key=value per line, # comments."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
