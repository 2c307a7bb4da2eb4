"""Daily feature schema and the categorical domains used by surveys."""

from __future__ import annotations

from dataclasses import dataclass

ROLES = ("nurse", "doctor")
LABELS = ("alertness", "happiness", "energy", "health", "stress")

WAKE_TYPES = ("natural", "alarm", "other")
SHIFTS = ("shift1", "shift2", "shift3")
SHIFT_NONE = "none"
# Time-to-fall-asleep bins in minutes: 0-5, 6-15, 16-30, 31-45, 45-60, 60+
TTFA_BINS = 6

ROLLING_WINDOWS = (7, 5, 3)


def _feature_names() -> tuple[str, ...]:
    names = ["hr_mean", "hr_sd", "hr_sampen",
             "sleep_duration", "sleep_efficiency", "sleep_regularity"]
    for w in ROLLING_WINDOWS:
        names += [f"sleep_dur_mean_{w}d", f"sleep_dur_sd_{w}d",
                  f"sleep_eff_mean_{w}d", f"sleep_eff_sd_{w}d"]
    names.append("time_to_fall_asleep_bin")
    names += [f"wake_{w}" for w in WAKE_TYPES]
    names += ["nap_count", "nap_duration", "steps_total"]
    for w in ROLLING_WINDOWS:
        names += [f"steps_mean_{w}d", f"steps_sd_{w}d"]
    names += ["entropy_stationary", "entropy_active"]
    names += [f"work_{s}" for s in SHIFTS]
    names += ["work_duration", "overwork", "caffeine_cups", "alcohol_or_drug"]
    return tuple(names)


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names plus the one-hot groups among them."""

    version: str
    names: tuple[str, ...]
    onehot_groups: dict[str, tuple[str, ...]]

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def onehot_members(self) -> set[str]:
        return {n for group in self.onehot_groups.values() for n in group}

    def numeric_names(self) -> tuple[str, ...]:
        members = self.onehot_members()
        return tuple(n for n in self.names if n not in members)


SCHEMA = FeatureSchema(
    version="1",
    names=_feature_names(),
    onehot_groups={
        "wake_type": tuple(f"wake_{w}" for w in WAKE_TYPES),
        "work_shift": tuple(f"work_{s}" for s in SHIFTS),
    },
)

assert len(SCHEMA) == 40
